"""Multi-level attention-guided graph network for image restoration."""

__version__ = "0.1.0"


def data_path(*parts: str):
    """Path to bundled data: ``data_path("samples")``, ``data_path("desk.cfg")``."""
    from pathlib import Path

    return Path(__file__).parent.joinpath("data", *parts)
