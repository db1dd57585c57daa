"""Quack Arena: a 2D team paintball environment.

Teams of circular players move, rotate, and shoot paint balls inside a square
arena.  A hit by an opposing team's ball eliminates a player; last team
standing ends the trial.  Geometry convention: a player's heading vector is
``(-sin(theta), cos(theta))``, so a per-tick world displacement is
``R(theta) @ (strafe*move_speed, forward*move_speed)``, positive ``rotate``
turns clockwise, and relative coordinates put the heading on the +x axis with
positive y on the clockwise side.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field, fields
from typing import Any

from .protocol import ENVIRONMENT, Reward

PLACEMENT_ATTEMPTS = 1000


class InitError(Exception):
    """No feasible player placement was found within the retry budget."""


@dataclass(frozen=True, slots=True)
class ArenaConfig:
    arena_size: float = 100.0
    teams: tuple[int, ...] = (1, 1)
    player_radius: float = 2.5
    ball_radius: float = 1.0
    shot_velocity: float = 100.0 / 60.0
    shot_cooldown: int = 10
    move_speed: float = 0.5
    turn_speed: float = math.pi / 30.0
    fov_half_angle: float = math.pi / 3.0
    fov_range: float = 50.0
    max_tick: int = 600
    seed: int = 0

    def __post_init__(self) -> None:
        if self.arena_size <= 4.0 * self.player_radius:
            raise ValueError("arena_size must exceed 4 * player_radius")
        if len(self.teams) < 1 or sum(self.teams) < 2 or any(t < 1 for t in self.teams):
            raise ValueError("need at least two players across non-empty teams")
        for name in ("player_radius", "ball_radius", "shot_velocity", "move_speed", "turn_speed", "fov_range"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0.0 < self.fov_half_angle <= math.pi):
            raise ValueError("fov_half_angle must lie in (0, pi]")
        if self.shot_cooldown < 1 or self.max_tick < 1:
            raise ValueError("shot_cooldown and max_tick must be positive integers")

    @classmethod
    def from_env_config(cls, env_config: dict[str, Any], seed: int, max_tick: int) -> "ArenaConfig":
        """Build a config from a trial's env_config, deriving size-relative
        defaults for anything omitted.  The trial seed and max_tick are
        authoritative and may not be overridden here."""
        known = {f.name for f in fields(cls)}
        unknown = set(env_config) - known
        if unknown:
            raise ValueError(f"unknown env_config fields: {sorted(unknown)}")
        if "seed" in env_config or "max_tick" in env_config:
            raise ValueError("seed and max_tick come from the trial params, not env_config")
        cfg = dict(env_config)
        size = float(cfg.get("arena_size", 100.0))
        cfg.setdefault("arena_size", size)
        cfg.setdefault("player_radius", size / 40.0)
        cfg.setdefault("ball_radius", size / 100.0)
        cfg.setdefault("shot_velocity", size / 60.0)
        cfg.setdefault("move_speed", size / 200.0)
        cfg.setdefault("fov_range", size / 2.0)
        if "teams" in cfg:
            cfg["teams"] = tuple(cfg["teams"])
        return cls(**cfg, seed=seed, max_tick=max_tick)


@dataclass(slots=True)
class PlayerState:
    name: str
    team: int
    x: float
    y: float
    theta: float
    vx: float = 0.0
    vy: float = 0.0
    alive: bool = True
    cooldown: int = 0


@dataclass(slots=True)
class Projectile:
    owner: str
    owner_team: int
    x: float
    y: float
    vx: float
    vy: float


@dataclass
class ArenaState:
    config: ArenaConfig
    players: list[PlayerState]
    projectiles: list[Projectile] = field(default_factory=list)
    tick: int = 0
    opponents_at_start: dict[str, int] = field(default_factory=dict)
    penalty_ticks: dict[str, int] = field(default_factory=dict)

    def player(self, name: str) -> PlayerState:
        for p in self.players:
            if p.name == name:
                return p
        raise KeyError(name)

    def teams_alive(self) -> set[int]:
        return {p.team for p in self.players if p.alive}


@dataclass(frozen=True, slots=True)
class StepResult:
    observations: dict[str, dict[str, Any]]
    rewards: list[Reward]
    terminal: bool
    terminal_reason: str | None


def _heading(theta: float) -> tuple[float, float]:
    return (-math.sin(theta), math.cos(theta))


def _wrap_angle(theta: float) -> float:
    wrapped = math.remainder(theta, 2.0 * math.pi)
    if wrapped >= math.pi:
        wrapped -= 2.0 * math.pi
    return wrapped


def _relative(dx: float, dy: float, theta: float) -> tuple[float, float]:
    """World offset into the observer frame: +x along heading, +y clockwise."""
    hx, hy = _heading(theta)
    nx, ny = -math.cos(theta), -math.sin(theta)
    return (dx * hx + dy * hy, dx * nx + dy * ny)


def arena_init(config: ArenaConfig, player_names: list[str]) -> ArenaState:
    """Place players by seeded rejection sampling at pairwise distance of at
    least four player radii, all alive, no projectiles."""
    if len(player_names) != sum(config.teams):
        raise InitError(
            f"team sizes {config.teams} need {sum(config.teams)} players, got {len(player_names)}"
        )
    rng = random.Random(config.seed)
    size = config.arena_size
    rp = config.player_radius
    lo, hi = rp, size - rp
    min_dist = 4.0 * rp
    positions: list[tuple[float, float]] = []
    attempts = 0
    while len(positions) < len(player_names):
        if attempts >= PLACEMENT_ATTEMPTS:
            raise InitError(f"no feasible placement after {PLACEMENT_ATTEMPTS} attempts")
        attempts += 1
        x = lo + rng.random() * (hi - lo)
        y = lo + rng.random() * (hi - lo)
        if all(math.hypot(x - px, y - py) >= min_dist for px, py in positions):
            positions.append((x, y))

    teams: list[int] = []
    for team_index, team_size in enumerate(config.teams):
        teams.extend([team_index] * team_size)

    players = [
        PlayerState(
            name=name,
            team=teams[i],
            x=positions[i][0],
            y=positions[i][1],
            theta=rng.random() * 2.0 * math.pi - math.pi,
        )
        for i, name in enumerate(player_names)
    ]
    total = len(players)
    team_counts = {t: teams.count(t) for t in set(teams)}
    opponents = {p.name: total - team_counts[p.team] for p in players}
    return ArenaState(
        config=config,
        players=players,
        opponents_at_start=opponents,
        penalty_ticks={p.name: 0 for p in players},
    )


def compute_visibility(state: ArenaState, player: PlayerState) -> tuple[list[dict], list[dict]]:
    """Entities within fov_range and within the fov half-angle of the
    player's heading (boundaries inclusive), in the player's frame."""
    cfg = state.config
    visible_players: list[dict] = []
    visible_projectiles: list[dict] = []

    def in_fov(rel_x: float, rel_y: float) -> bool:
        dist = math.hypot(rel_x, rel_y)
        if dist > cfg.fov_range:
            return False
        if dist == 0.0:
            return True
        return abs(math.atan2(rel_y, rel_x)) <= cfg.fov_half_angle

    for other in state.players:
        if other.name == player.name:
            continue
        rel_x, rel_y = _relative(other.x - player.x, other.y - player.y, player.theta)
        if in_fov(rel_x, rel_y):
            visible_players.append({
                "x": rel_x,
                "y": rel_y,
                "theta": _wrap_angle(other.theta - player.theta),
                "team_is_opponent": other.team != player.team,
                "alive": other.alive,
            })
    for ball in state.projectiles:
        rel_x, rel_y = _relative(ball.x - player.x, ball.y - player.y, player.theta)
        if in_fov(rel_x, rel_y):
            rvx, rvy = _relative(ball.vx, ball.vy, player.theta)
            visible_projectiles.append({"x": rel_x, "y": rel_y, "vx": rvx, "vy": rvy})
    return visible_players, visible_projectiles


def player_observation(state: ArenaState, player: PlayerState) -> dict[str, Any]:
    if player.alive:
        visible_players, visible_projectiles = compute_visibility(state, player)
    else:
        visible_players, visible_projectiles = [], []
    return {
        "self": {"x": player.x, "y": player.y, "theta": player.theta, "alive": player.alive},
        "visible_players": visible_players,
        "visible_projectiles": visible_projectiles,
        "tick_id": state.tick,
    }


def observations(state: ArenaState) -> dict[str, dict[str, Any]]:
    return {p.name: player_observation(state, p) for p in state.players}


def world_observation(state: ArenaState) -> dict[str, Any]:
    """Full world state for observer actors (drives visualization)."""
    cfg = state.config
    return {
        "arena_size": cfg.arena_size,
        "fov_half_angle": cfg.fov_half_angle,
        "fov_range": cfg.fov_range,
        "tick_id": state.tick,
        "players": [
            {
                "name": p.name,
                "team": p.team,
                "x": p.x,
                "y": p.y,
                "theta": p.theta,
                "alive": p.alive,
                "cooldown": p.cooldown,
            }
            for p in state.players
        ],
        "projectiles": [
            {"x": b.x, "y": b.y, "vx": b.vx, "vy": b.vy, "team": b.owner_team}
            for b in state.projectiles
        ],
    }


def _segment_circle_hit(x0: float, y0: float, dx: float, dy: float,
                        cx: float, cy: float, radius: float) -> float | None:
    """Earliest t in [0, 1] at which the segment point enters the circle."""
    fx, fy = x0 - cx, y0 - cy
    a = dx * dx + dy * dy
    b = 2.0 * (fx * dx + fy * dy)
    c = fx * fx + fy * fy - radius * radius
    if c <= 0.0:
        return 0.0
    if a == 0.0:
        return None
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        return None
    sqrt_disc = math.sqrt(disc)
    t = (-b - sqrt_disc) / (2.0 * a)
    if 0.0 <= t <= 1.0:
        return t
    return None


def _segment_wall_exit(x0: float, y0: float, dx: float, dy: float,
                       lo: float, hi: float) -> float | None:
    """Earliest t in [0, 1] at which the segment point reaches a wall band."""
    best: float | None = None
    for p0, d in ((x0, dx), (y0, dy)):
        for bound, sign in ((lo, -1.0), (hi, 1.0)):
            if d == 0.0:
                continue
            t = (bound - p0) / d
            if 0.0 <= t <= 1.0 and sign * d > 0.0:
                best = t if best is None else min(best, t)
    if x0 <= lo or x0 >= hi or y0 <= lo or y0 >= hi:
        return 0.0
    return best


def arena_step(state: ArenaState, actions: dict[str, dict[str, Any]]) -> StepResult:
    """Advance one tick: kinematics, firing, projectile flight and hits,
    net per-player rewards, terminal check, fresh observations.

    Per-player time penalties are emitted as consecutive differences of the
    rounded cumulative series i/max_tick, so a player's summed penalties are
    exactly -(paid_ticks/max_tick) in floating point, which the stated total
    reward formulas require.
    """
    cfg = state.config
    rp, rb = cfg.player_radius, cfg.ball_radius
    lo, hi = rp, cfg.arena_size - rp

    alive_at_start = {p.name for p in state.players if p.alive}

    # Kinematics: displacement uses the pre-rotation heading, then the player
    # turns; positions clamp to the playable band.
    for p in state.players:
        if not p.alive:
            p.vx = p.vy = 0.0
            continue
        act = actions.get(p.name)
        if act is None:
            continue
        hx, hy = _heading(p.theta)
        nx, ny = math.cos(p.theta), math.sin(p.theta)
        dx = act["forward"] * cfg.move_speed * hx + act["strafe"] * cfg.move_speed * nx
        dy = act["forward"] * cfg.move_speed * hy + act["strafe"] * cfg.move_speed * ny
        new_x = min(max(p.x + dx, lo), hi)
        new_y = min(max(p.y + dy, lo), hi)
        p.vx, p.vy = new_x - p.x, new_y - p.y
        p.x, p.y = new_x, new_y
        p.theta = _wrap_angle(p.theta + act["rotate"] * cfg.turn_speed)

    # Cooldowns tick down before the fire gate, so a shot becomes available
    # exactly shot_cooldown ticks after the last one.
    for p in state.players:
        if p.alive and p.cooldown > 0:
            p.cooldown -= 1

    for p in state.players:
        if not p.alive:
            continue
        act = actions.get(p.name)
        if act is None or not act["fire"] or p.cooldown > 0:
            continue
        hx, hy = _heading(p.theta)
        muzzle = rp + rb
        state.projectiles.append(Projectile(
            owner=p.name,
            owner_team=p.team,
            x=p.x + hx * muzzle,
            y=p.y + hy * muzzle,
            vx=cfg.shot_velocity * hx + p.vx,
            vy=cfg.shot_velocity * hy + p.vy,
        ))
        p.cooldown = cfg.shot_cooldown

    # All flights are tested against this tick's single position snapshot, so
    # simultaneous mutual eliminations both land and both shooters score.
    hits: list[tuple[float, int, str, str]] = []
    removed: set[int] = set()
    wall_lo, wall_hi = rb, cfg.arena_size - rb
    hit_radius = rp + rb
    for idx, ball in enumerate(state.projectiles):
        best: tuple[float, str] | None = None
        for p in state.players:
            if p.team == ball.owner_team or p.name not in alive_at_start:
                continue
            t = _segment_circle_hit(ball.x, ball.y, ball.vx, ball.vy, p.x, p.y, hit_radius)
            if t is not None and (best is None or t < best[0]):
                best = (t, p.name)
        t_wall = _segment_wall_exit(ball.x, ball.y, ball.vx, ball.vy, wall_lo, wall_hi)
        if best is not None and (t_wall is None or best[0] <= t_wall):
            hits.append((best[0], idx, best[1], ball.owner))
        elif t_wall is not None:
            removed.add(idx)
        else:
            ball.x += ball.vx
            ball.y += ball.vy

    eliminated: list[str] = []
    kills: dict[str, int] = {}
    for t, idx, victim_name, shooter in sorted(hits):
        removed.add(idx)
        victim = state.player(victim_name)
        if victim.alive:
            victim.alive = False
            victim.cooldown = 0
            eliminated.append(victim_name)
            kills[shooter] = kills.get(shooter, 0) + 1
    if removed:
        state.projectiles = [b for i, b in enumerate(state.projectiles) if i not in removed]

    # Net reward per participating player: eliminated players take the -1
    # termination penalty in place of this tick's time penalty; survivors pay
    # the telescoped time penalty; shooters add 1/opponents per elimination.
    rewards: list[Reward] = []
    for p in state.players:
        if p.name not in alive_at_start:
            continue
        on_target = kills.get(p.name, 0) * (1.0 / state.opponents_at_start[p.name])
        if p.alive:
            paid = state.penalty_ticks[p.name] + 1
            state.penalty_ticks[p.name] = paid
            penalty = (paid / cfg.max_tick) - ((paid - 1) / cfg.max_tick)
            value = on_target - penalty
        else:
            value = on_target - 1.0
        rewards.append(Reward(
            value=value,
            confidence=1.0,
            source=ENVIRONMENT,
            target_actor=p.name,
            target_tick=state.tick,
        ))

    state.tick += 1
    terminal_reason: str | None = None
    if len(state.teams_alive()) <= 1:
        terminal_reason = "last_team_standing"
    elif state.tick >= cfg.max_tick:
        terminal_reason = "max_tick"

    return StepResult(
        observations=observations(state),
        rewards=rewards,
        terminal=terminal_reason is not None,
        terminal_reason=terminal_reason,
    )
