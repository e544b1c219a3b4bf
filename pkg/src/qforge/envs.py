"""Built-in arcade-style environments and the frame pipeline.

Two desk-scale games render RGB frames that flow through the same
preprocessing every pixel agent uses: grayscale (ITU-R 601 luma), bilinear
resize to height 110 x width 84 (half-pixel sampling, the
corner-aligned-off convention), center crop to 84x84, then normalization
with mean 0.5 / std 0.5 into [-1, 1].

Determinism contract: a (seed, action sequence) pair reproduces frames,
rewards, and done flags bit-identically at fp64.

Environment rules
-----------------
Catch: a 21-column grid. A ball spawns in a seeded random column on the
top row and falls one row per step across the 21 rows; the paddle starts
in the center of the bottom row and moves with LEFT/STAY/RIGHT. When the
ball reaches the bottom row the episode ends with reward +1 if the paddle
is under it, otherwise -1. All intermediate steps have reward 0. The ball
is always catchable: the paddle is at most 10 columns away and has 20
moves.

Gauntlet: a Space-Invaders-like 21x21 grid. The player sits on the bottom
row with actions LEFT/STAY/RIGHT/FIRE. Enemies spawn in seeded random
columns on the top row every 3 steps and descend one row every 2 steps.
FIRE destroys the lowest enemy in the player's column (+10). Each enemy
that reaches the bottom row costs -1 and disappears. Episodes are capped
at 500 steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

TARGET = 84
RESIZE_H, RESIZE_W = 110, 84

# luma coefficients (ITU-R 601); a bit-exactness anchor
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class EnvSpec:
    name: str
    action_count: int
    action_labels: tuple
    frame_shape: tuple  # (H0, W0, 3)
    max_steps: int
    seed: int = 42


# -- preprocessing --------------------------------------------------------------


def grayscale(frame: np.ndarray) -> np.ndarray:
    """RGB bytes -> luma in [0, 1], fp64."""
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ShapeError(f"expected RGB frame [H,W,3], got {frame.shape}")
    return frame.astype(np.float64) @ LUMA / 255.0


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel centers (align_corners off)."""
    h, w = img.shape
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = img[y0][:, x0] * (1.0 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1.0 - wx) + img[y1][:, x1] * wx
    return top * (1.0 - wy) + bot * wy


def center_crop(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape
    r0 = (h - out_h) // 2
    c0 = (w - out_w) // 2
    return img[r0 : r0 + out_h, c0 : c0 + out_w]


def preprocess_frame(frame: np.ndarray) -> np.ndarray:
    """RGB bytes -> normalized [84,84] fp64 in [-1, 1]."""
    g = grayscale(frame)
    g = resize_bilinear(g, RESIZE_H, RESIZE_W)
    g = center_crop(g, TARGET, TARGET)
    return (g - 0.5) / 0.5


class FrameStack:
    """Ring of the F most recent preprocessed frames, newest last."""

    def __init__(self, frames: int):
        if frames < 1:
            raise ConfigError(f"frame stack needs >= 1 frames, got {frames}")
        self.frames = frames
        self._buf = None

    def reset(self, frame: np.ndarray) -> np.ndarray:
        # fill with copies of the first frame: no cold-start special case
        self._buf = np.repeat(frame[None, :, :], self.frames, axis=0)
        return self._buf.copy()

    def push(self, frame: np.ndarray) -> np.ndarray:
        if self._buf is None:
            raise ConfigError("frame stack used before reset")
        self._buf = np.concatenate([self._buf[1:], frame[None, :, :]], axis=0)
        return self._buf.copy()


def write_ppm(frame: np.ndarray, path):
    """Dump an RGB byte frame as binary PPM (debugging aid)."""
    h, w, _ = frame.shape
    with open(path, "wb") as fh:
        fh.write(f"P6 {w} {h} 255\n".encode("ascii"))
        fh.write(frame.astype(np.uint8).tobytes())


# -- environments ----------------------------------------------------------------


class Env:
    """Adapter interface: reset(seed) -> frame, step(action) -> (frame, r, done).

    External bindings (e.g. an Atari adapter) can implement this same
    surface; none ships.
    """

    spec: EnvSpec

    def reset(self, seed: int | None = None) -> np.ndarray:
        raise NotImplementedError

    def step(self, action: int):
        raise NotImplementedError


class CatchEnv(Env):
    GRID = 21
    SCALE = 5
    # vertical margin so the whole grid survives resize-to-110 + center crop
    # (the crop keeps only the middle 84/110 of the frame height)
    V_PAD_TOP = 17
    V_PAD = 35
    # mid-gray background preprocesses to ~0, keeping dense projections
    # well conditioned (a black background lands at -1 after normalization)
    BG_COLOR = (128, 128, 128)
    BALL_COLOR = (255, 200, 50)
    PADDLE_COLOR = (255, 255, 255)

    def __init__(self, seed: int = 42):
        self.spec = EnvSpec(
            name="catch",
            action_count=3,
            action_labels=("LEFT", "STAY", "RIGHT"),
            frame_shape=(
                self.GRID * self.SCALE + self.V_PAD,
                self.GRID * self.SCALE,
                3,
            ),
            max_steps=self.GRID - 1,
            seed=seed,
        )
        self._seed = seed
        self.reset(seed)

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self._seed = seed
        self._rng = np.random.default_rng(self._seed)
        self.ball_col = int(self._rng.integers(0, self.GRID))
        self.ball_row = 0
        self.paddle = self.GRID // 2
        self.steps = 0
        self.done = False
        return self.render()

    def step(self, action: int):
        if not 0 <= action < 3:
            raise ConfigError(f"catch action must be in [0,3), got {action}")
        if self.done:
            raise ConfigError("step called on a finished episode; call reset")
        self.paddle = int(np.clip(self.paddle + (action - 1), 0, self.GRID - 1))
        self.ball_row += 1
        self.steps += 1
        reward = 0.0
        if self.ball_row == self.GRID - 1:
            self.done = True
            reward = 1.0 if self.paddle == self.ball_col else -1.0
        return self.render(), reward, self.done

    def render(self) -> np.ndarray:
        img = np.full(self.spec.frame_shape, self.BG_COLOR, dtype=np.uint8)
        s, v = self.SCALE, self.V_PAD_TOP
        r, c = self.ball_row, self.ball_col
        img[v + r * s : v + (r + 1) * s, c * s : (c + 1) * s] = self.BALL_COLOR
        pr = self.GRID - 1
        img[v + pr * s : v + (pr + 1) * s, self.paddle * s : (self.paddle + 1) * s] = (
            self.PADDLE_COLOR
        )
        return img


class GauntletEnv(Env):
    GRID = 21
    SCALE = 5
    V_PAD_TOP = 17
    V_PAD = 35
    SPAWN_PERIOD = 3
    DESCENT_PERIOD = 2
    BG_COLOR = (128, 128, 128)
    ENEMY_COLOR = (60, 220, 60)
    PLAYER_COLOR = (255, 255, 255)
    HIT_REWARD = 10.0
    BREACH_PENALTY = -1.0

    def __init__(self, seed: int = 42, max_steps: int = 500):
        self.spec = EnvSpec(
            name="gauntlet",
            action_count=4,
            action_labels=("LEFT", "STAY", "RIGHT", "FIRE"),
            frame_shape=(
                self.GRID * self.SCALE + self.V_PAD,
                self.GRID * self.SCALE,
                3,
            ),
            max_steps=max_steps,
            seed=seed,
        )
        self._seed = seed
        self.reset(seed)

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self._seed = seed
        self._rng = np.random.default_rng(self._seed)
        self.enemies: list = []  # [row, col]
        self.player = self.GRID // 2
        self.steps = 0
        self.done = False
        self._spawn()
        return self.render()

    def _spawn(self):
        self.enemies.append([0, int(self._rng.integers(0, self.GRID))])

    def step(self, action: int):
        if not 0 <= action < 4:
            raise ConfigError(f"gauntlet action must be in [0,4), got {action}")
        if self.done:
            raise ConfigError("step called on a finished episode; call reset")
        reward = 0.0
        if action == 3:  # FIRE: instant shot up the player's column
            hits = [e for e in self.enemies if e[1] == self.player]
            if hits:
                lowest = max(hits, key=lambda e: e[0])
                self.enemies.remove(lowest)
                reward += self.HIT_REWARD
        else:
            self.player = int(np.clip(self.player + (action - 1), 0, self.GRID - 1))
        self.steps += 1
        if self.steps % self.DESCENT_PERIOD == 0:
            for e in self.enemies:
                e[0] += 1
            breached = [e for e in self.enemies if e[0] >= self.GRID - 1]
            for e in breached:
                self.enemies.remove(e)
                reward += self.BREACH_PENALTY
        if self.steps % self.SPAWN_PERIOD == 0:
            self._spawn()
        if self.steps >= self.spec.max_steps:
            self.done = True
        return self.render(), reward, self.done

    def render(self) -> np.ndarray:
        img = np.full(self.spec.frame_shape, self.BG_COLOR, dtype=np.uint8)
        s, v = self.SCALE, self.V_PAD_TOP
        for r, c in self.enemies:
            img[v + r * s : v + (r + 1) * s, c * s : (c + 1) * s] = self.ENEMY_COLOR
        pr = self.GRID - 1
        img[v + pr * s : v + (pr + 1) * s, self.player * s : (self.player + 1) * s] = (
            self.PLAYER_COLOR
        )
        return img


ENV_BUILDERS = {
    "catch": CatchEnv,
    "gauntlet": GauntletEnv,
}


def make_env(name: str, seed: int = 42) -> Env:
    if name not in ENV_BUILDERS:
        raise ConfigError(f"unknown env {name!r}; available: {sorted(ENV_BUILDERS)}")
    return ENV_BUILDERS[name](seed=seed)
