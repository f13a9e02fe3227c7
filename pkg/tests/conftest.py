from __future__ import annotations

import numpy as np
import pytest

from guimem.core import Screenshot, TaskGoal


def make_pixels(h: int, w: int, seed: int = 0) -> np.ndarray:
    """Raster with distinct pixel values so crops are position-sensitive."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)


def make_screenshot(step: int = 1, h: int = 12, w: int = 12, seed: int | None = None) -> Screenshot:
    return Screenshot(
        pixels=make_pixels(h, w, seed=step if seed is None else seed),
        step_index=step,
        source_id=f"shot-{step}",
    )


@pytest.fixture
def goal() -> TaskGoal:
    return TaskGoal(text="enable dark mode in settings", episode_id="ep-test")
