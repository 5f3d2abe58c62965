"""Safe fast charging of a lithium-ion cell with DDPG and a QP safety layer."""

__version__ = "0.1.0"
