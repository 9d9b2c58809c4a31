import logging

from orch import settings

FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def setup(level=None):
    """Configure the root handler once; later calls only adjust the level."""
    level = (level or settings.LOG_LEVEL).upper()
    root = logging.getLogger()
    if not root.handlers:
        logging.basicConfig(level=level, format=FORMAT)
    root.setLevel(level)
