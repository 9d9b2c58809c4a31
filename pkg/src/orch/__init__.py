"""Gang-scheduled job orchestration: a master, per-task executors and two scheduler backends."""

__version__ = "0.1.0"
