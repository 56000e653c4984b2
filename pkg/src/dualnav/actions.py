"""Low-level action tokens and the waypoint -> token-sequence compiler.

A selected waypoint is compiled into turn/forward tokens by quantizing
the heading gap to 15-degree turns and the distance to 0.25 m forward
steps, dropping the remainders. All rotations come before all
translations, which makes the landing point analytic.
"""

from __future__ import annotations

import math
from enum import IntEnum

import numpy as np

from .world import FORWARD_STEP, TURN_STEP, Pose, SemanticGrid, heading_vector, step_low


class Action(IntEnum):
    LEFT = 0
    RIGHT = 1
    FORWARD = 2
    STOP = 3
    END = 4  # sequence terminator; rendered as ","


MAX_SEQ_LEN = 30  # motion/stop tokens before END

TOKEN_TEXT = {
    Action.LEFT: "left",
    Action.RIGHT: "right",
    Action.FORWARD: "forward",
    Action.STOP: "stop",
    Action.END: ",",
}
TEXT_TOKEN = {v: k for k, v in TOKEN_TEXT.items()}


def render_tokens(seq: list[Action]) -> str:
    return " ".join(TOKEN_TEXT[a] for a in seq)


def parse_tokens(text: str) -> list[Action]:
    out = []
    for word in text.split():
        if word not in TEXT_TOKEN:
            raise ValueError(f"unknown action token {word!r}")
        out.append(TEXT_TOKEN[word])
    return out


def validate_sequence(seq: list[Action]) -> None:
    """Raise if the sequence violates the END-at-tail / length contract."""
    ends = [i for i, a in enumerate(seq) if a == Action.END]
    if ends and (len(ends) > 1 or ends[0] != len(seq) - 1):
        raise ValueError("END must appear at most once, at the tail")
    body = len(seq) - len(ends)
    if body > MAX_SEQ_LEN:
        raise ValueError(f"sequence body length {body} exceeds {MAX_SEQ_LEN}")


def reduce_heading(raw_gap: float) -> float:
    """Signed smaller rotation in [-180, 180); the 180 tie maps to -180 (LEFT)."""
    return ((raw_gap + 180.0) % 360.0) - 180.0


def compile_waypoint(delta_heading: float, distance: float) -> list[Action]:
    """Quantize a heading gap and distance into turn/forward tokens.

    Caller pre-reduces the gap to the smaller rotation; positive means
    RIGHT. Remainders below one 15-degree turn or one 0.25 m step are
    dropped. No END is appended.
    """
    if not (math.isfinite(delta_heading) and math.isfinite(distance)):
        raise ValueError("non-finite compile input")
    n_turn = int(math.floor(abs(delta_heading) / TURN_STEP))
    turn = Action.RIGHT if delta_heading > 0 else Action.LEFT
    n_fwd = int(math.floor(max(distance, 0.0) / FORWARD_STEP))
    return [turn] * n_turn + [Action.FORWARD] * n_fwd


def displacement_of(seq: list[Action]) -> tuple[float, tuple[float, float]]:
    """Kinematic integration from (0, 0, 0deg), ignoring collisions.

    Returns the signed heading change (unwrapped) and the (dx, dy) offset.
    STOP and END contribute nothing.
    """
    heading = 0.0
    x = y = 0.0
    for a in seq:
        if a == Action.LEFT:
            heading -= TURN_STEP
        elif a == Action.RIGHT:
            heading += TURN_STEP
        elif a == Action.FORWARD:
            ux, uy = heading_vector(heading)
            x += FORWARD_STEP * ux
            y += FORWARD_STEP * uy
    return heading, (x, y)


def execute_sequence(grid: SemanticGrid, pose: Pose,
                     seq: list[Action]) -> tuple[list[Pose], Pose, int]:
    """Run the tokens through the simulator, recording the pose after each.

    Execution halts early only at STOP; a blocked FORWARD keeps the pose
    and counts one collision.
    """
    traj: list[Pose] = []
    collisions = 0
    for a in seq:
        if a == Action.END:
            traj.append(pose)
            continue
        pose, hit = step_low(grid, pose, a.name)
        collisions += int(hit)
        traj.append(pose)
        if a == Action.STOP:
            break
    return traj, pose, collisions


def label_low_sequence(pose: Pose, target: tuple[float, float]) -> list[Action]:
    """Compile the pose -> world-target gap into a supervision label (+ END)."""
    dx = target[0] - pose.x
    dy = target[1] - pose.y
    gap = reduce_heading(math.degrees(math.atan2(dy, dx)) - pose.heading)
    seq = compile_waypoint(gap, float(np.hypot(dx, dy)))
    return seq + [Action.END]
