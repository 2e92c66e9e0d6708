"""Energy-aware routing between a small on-device policy and a large remote one."""

__version__ = "0.1.0"
