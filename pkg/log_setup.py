import logging

from rich.logging import RichHandler


def setup_logging(verbosity: int = 0) -> None:
    level = logging.DEBUG if verbosity > 0 else logging.INFO
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    root.addHandler(RichHandler(rich_tracebacks=True, show_path=False, markup=False))
    root.setLevel(level)
