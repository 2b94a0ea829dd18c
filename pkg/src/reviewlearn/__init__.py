"""Review learning: continual learning by replaying samples drawn from the model itself."""

__version__ = "0.1.0"
