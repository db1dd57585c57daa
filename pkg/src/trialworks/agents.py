"""Player actor implementations: random baseline, scripted heuristic, and a
REINFORCE learner over a discretized action grid.

All three speak the same observation/action schemas, so a trial config can
swap one for another without any other change.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .protocol import CHECKPOINT_MSG_TYPE, Envelope, ORCHESTRATOR, decode_frame, encode_frame

# Action grid: {fire: 2} x {strafe, forward, rotate: -1, 0, +1}, row-major
# with fire as the slowest axis.
GRID_SIZE = 54
_LEVELS = (-1.0, 0.0, 1.0)

SCORE_CLAMP = 30.0
FEATURE_SIZE = 17
DEFAULT_FOV_RANGE = 50.0


class ModelError(Exception):
    """The policy produced non-finite scores."""


def grid_decode(index: int) -> dict[str, Any]:
    if not (0 <= index < GRID_SIZE):
        raise IndexError(f"grid index {index} out of range")
    index, rotate = divmod(index, 3)
    index, forward = divmod(index, 3)
    fire, strafe = divmod(index, 3)
    return {
        "fire": bool(fire),
        "strafe": _LEVELS[strafe],
        "forward": _LEVELS[forward],
        "rotate": _LEVELS[rotate],
    }


def grid_encode(action: dict[str, Any]) -> int:
    fire = 1 if action["fire"] else 0
    strafe = _LEVELS.index(action["strafe"])
    forward = _LEVELS.index(action["forward"])
    rotate = _LEVELS.index(action["rotate"])
    return ((fire * 3 + strafe) * 3 + forward) * 3 + rotate


def random_act(observation: dict[str, Any], rng: random.Random) -> dict[str, Any]:
    """Uniform draw over the 54-cell grid."""
    return grid_decode(rng.randrange(GRID_SIZE))


def _nearest(entries: list[dict[str, Any]]) -> dict[str, Any] | None:
    if not entries:
        return None
    return min(entries, key=lambda e: math.hypot(e["x"], e["y"]))


def heuristic_act(observation: dict[str, Any], fov_range: float = DEFAULT_FOV_RANGE) -> dict[str, Any]:
    """Scripted duelist: turn toward the nearest living opponent, fire when
    nearly on target, close distance when far, circle-strafe when near; scan
    by rotating when nothing is visible."""
    opponents = [
        p for p in observation["visible_players"]
        if p["team_is_opponent"] and p["alive"]
    ]
    target = _nearest(opponents)
    if target is None:
        return {"fire": False, "strafe": 0.0, "forward": 0.0, "rotate": 1.0}
    bearing = math.atan2(target["y"], target["x"])
    distance = math.hypot(target["x"], target["y"])
    rotate = max(-1.0, min(1.0, 3.0 * bearing))
    fire = abs(bearing) < 0.1
    if distance > 0.3 * fov_range:
        forward, strafe = 1.0, 0.0
    else:
        forward, strafe = 0.0, (1.0 if bearing >= 0.0 else -1.0)
    return {"fire": fire, "strafe": strafe, "forward": forward, "rotate": rotate}


def extract_features(observation: dict[str, Any], fov_range: float = DEFAULT_FOV_RANGE) -> np.ndarray:
    """Fixed-length feature vector: bias, self pose, nearest-opponent polar
    coordinates and heading, nearest-projectile polar coordinates, alive
    flags.  Absent entities encode as range = fov_range, bearing = 0 with a
    zero presence flag."""
    me = observation["self"]
    scale = 2.0 * fov_range
    features = np.empty(FEATURE_SIZE, dtype=np.float64)
    features[0] = 1.0
    features[1] = me["x"] / scale
    features[2] = me["y"] / scale
    features[3] = math.cos(me["theta"])
    features[4] = math.sin(me["theta"])

    opponents = [
        p for p in observation["visible_players"]
        if p["team_is_opponent"] and p["alive"]
    ]
    target = _nearest(opponents)
    if target is not None:
        rng_ = math.hypot(target["x"], target["y"])
        bearing = math.atan2(target["y"], target["x"])
        heading = target["theta"]
        features[5:11] = (
            min(rng_ / fov_range, 1.0),
            math.cos(bearing), math.sin(bearing),
            math.cos(heading), math.sin(heading),
            1.0,
        )
        opponent_alive = 1.0
    else:
        features[5:11] = (1.0, 1.0, 0.0, 1.0, 0.0, 0.0)
        opponent_alive = 0.0

    ball = _nearest(observation["visible_projectiles"])
    if ball is not None:
        rng_ = math.hypot(ball["x"], ball["y"])
        bearing = math.atan2(ball["y"], ball["x"])
        features[11:15] = (min(rng_ / fov_range, 1.0), math.cos(bearing), math.sin(bearing), 1.0)
    else:
        features[11:15] = (1.0, 1.0, 0.0, 0.0)

    features[15] = 1.0 if me["alive"] else 0.0
    features[16] = opponent_alive
    return features


@dataclass
class PolicyModel:
    """Linear scores per grid cell over hand-crafted features, softmaxed."""

    weights: np.ndarray = field(default_factory=lambda: np.zeros((GRID_SIZE, FEATURE_SIZE)))
    learning_rate: float = 0.01
    discount: float = 0.99
    fov_range: float = DEFAULT_FOV_RANGE

    def distribution(self, features: np.ndarray) -> np.ndarray:
        scores = self.weights @ features
        if not np.all(np.isfinite(scores)):
            raise ModelError("non-finite policy scores")
        scores = np.clip(scores, -SCORE_CLAMP, SCORE_CLAMP)
        scores = scores - scores.max()
        exp = np.exp(scores)
        return exp / exp.sum()

    def grad_log_prob(self, features: np.ndarray, probs: np.ndarray, cell: int) -> np.ndarray:
        indicator = np.zeros(GRID_SIZE)
        indicator[cell] = 1.0
        return np.outer(indicator - probs, features)


@dataclass(frozen=True, slots=True)
class EpisodeStep:
    features: np.ndarray
    cell: int
    log_prob: float
    reward: float


def reinforce_act(
    model: PolicyModel, observation: dict[str, Any], rng: random.Random
) -> tuple[dict[str, Any], float, int, np.ndarray]:
    """Sample a grid cell from the softmax policy; returns the decoded action,
    its log-probability, the cell index, and the features used."""
    features = extract_features(observation, model.fov_range)
    probs = model.distribution(features)
    draw = rng.random()
    cumulative = 0.0
    cell = GRID_SIZE - 1
    for i, p in enumerate(probs):
        cumulative += p
        if draw < cumulative:
            cell = i
            break
    return grid_decode(cell), float(np.log(probs[cell])), cell, features


def returns_to_go(rewards: Sequence[float], discount: float) -> list[float]:
    result = [0.0] * len(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + discount * acc
        result[t] = acc
    return result


def reinforce_update(model: PolicyModel, episode: Sequence[EpisodeStep]) -> PolicyModel:
    """One REINFORCE step from a completed episode: weights move along
    lr * G_t * grad log pi(a_t | s_t), with returns normalized to zero mean
    and unit variance (variance floor 1e-8) when the episode has >= 2 steps."""
    if not episode:
        return model
    returns = np.array(returns_to_go([s.reward for s in episode], model.discount))
    if len(episode) >= 2:
        std = math.sqrt(max(float(returns.var()), 1e-8))
        returns = (returns - returns.mean()) / std
    delta = np.zeros_like(model.weights)
    for step, g in zip(episode, returns):
        probs = model.distribution(step.features)
        delta += g * model.grad_log_prob(step.features, probs, step.cell)
    model.weights += model.learning_rate * delta
    return model


def save_model(model: PolicyModel, path: str | Path) -> None:
    """Checkpoint as one frame holding named flat arrays."""
    payload = {
        "arrays": [{
            "name": "weights",
            "shape": list(model.weights.shape),
            "data": [float(v) for v in model.weights.ravel()],
        }],
        "learning_rate": model.learning_rate,
        "discount": model.discount,
        "fov_range": model.fov_range,
    }
    frame = encode_frame(Envelope(
        msg_type=CHECKPOINT_MSG_TYPE, trial_id="", tick_id=0, sender=ORCHESTRATOR, payload=payload,
    ))
    Path(path).write_bytes(frame)


def load_model(path: str | Path) -> PolicyModel:
    envelope, _ = decode_frame(Path(path).read_bytes())
    if envelope.msg_type != CHECKPOINT_MSG_TYPE:
        raise ModelError(f"not a model checkpoint: {envelope.msg_type}")
    payload = envelope.payload
    arrays = {a["name"]: np.array(a["data"]).reshape(a["shape"]) for a in payload["arrays"]}
    return PolicyModel(
        weights=arrays["weights"],
        learning_rate=payload["learning_rate"],
        discount=payload["discount"],
        fov_range=payload.get("fov_range", DEFAULT_FOV_RANGE),
    )
