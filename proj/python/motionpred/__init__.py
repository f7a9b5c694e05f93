"""Action-conditioned motion in-betweening and two-stage prediction."""

from ._core import *  # noqa: F401,F403
from ._core import __doc__  # noqa: F401


def centre_context(sequence, t_start, t_between, t_end):
    """Split the centre window of a sequence into (start, between, end) arrays."""
    frames = sequence.frames
    window = t_start + t_between + t_end
    if len(frames) < window:
        raise ValueError(f"sequence has {len(frames)} frames, the window needs {window}")
    first = (len(frames) - window) // 2
    mid = first + t_start
    end = mid + t_between
    return frames[first:mid], frames[mid:end], frames[end:end + t_end]
