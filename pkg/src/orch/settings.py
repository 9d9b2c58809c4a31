import os

# settings
HEARTBEAT_MS = 1000
HEARTBEAT_MISS_LIMIT = 3
MAX_ATTEMPTS = 3
TEARDOWN_GRACE_MS = 2000

# resources used when a group names none
DEFAULT_MEMORY_MB = 2048
DEFAULT_VCORES = 1
DEFAULT_GPUS = 0

# groups the config grammar accepts unless orch.application.task-types says otherwise
DEFAULT_TASK_TYPES = ("chief", "worker", "ps", "evaluator")
UNTRACKED_GROUPS = ("ps",)
DEFAULT_JOB_NAME = "orch-job"

# master
TICK_MS = 100
HORIZON_MS = 1_000_000
RECOVERY_ORDERS = ("release-first", "request-first")

# executor
ENV_PREFIX = "ORCH_"
CONNECT_TRIES = 5
CONNECT_BACKOFF_MS = 200
EXIT_SPAWN_FAILED = 127
EXIT_TORN_DOWN = 143
EXIT_PROTOCOL = 2

# sim
SIM_FIRST_PORT = 20000
SIM_PORTS_PER_HOST = 1000
SIM_CHILD_RUN_MS = 500

# local backend
LOCAL_SLOTS = 8
LOCAL_HOST = "127.0.0.1"

LOG_LEVEL = os.environ.get("ORCH_LOG_LEVEL", "WARNING")
