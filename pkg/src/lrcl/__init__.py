"""Low-rank adapted critic learning: LoRA critics, hypersphere projection,
categorical value heads and the chain-MDP toy experiment."""

__version__ = "0.1.0"
