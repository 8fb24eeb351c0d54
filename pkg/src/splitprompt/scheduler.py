"""Fine-tune-vs-inference scheduling as a finite-horizon production economy.

Three devices (a, b, c) stand for three edge models; each round's request
names the good (A, B, C) one of them can produce. Serving earns the base
profit plus the serving device's accumulated upgrade increments; upgrading
a device (fine-tuning its model) costs money now and raises that device's
per-serve profit from the next round on, up to a level cap.

Policies:
  - RS   picks uniformly among the legal actions (seeded);
  - MSIP maximizes the immediate reward;
  - MLCP solves the exact finite-horizon dynamic program for the whole
    request stream, so its total is the maximum cumulative profit. Among
    equal-value plans it serves as early and upgrades as late as possible
    (serve-first preference during forward extraction).

A distributional MLCP variant plans against a request distribution instead
of a known stream, for callers that do not want the foreknowledge oracle.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from itertools import product
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

DEVICES = ("a", "b", "c")
GOODS = ("A", "B", "C")
_DEVICE_INDEX = {d: i for i, d in enumerate(DEVICES)}
_GOOD_DEVICE = {g: i for i, g in enumerate(GOODS)}


class IllegalActionError(ValueError):
    """The action is not legal in the current state."""


@dataclass(frozen=True)
class Economy:
    base_profit: float = 50.0
    upgrade_cost: float = 50.0
    upgrade_increment: float = 25.0
    max_level: int = 2

    def __post_init__(self):
        if (self.base_profit < 0 or self.upgrade_cost < 0
                or self.upgrade_increment < 0 or self.max_level < 0):
            raise ValueError("economy parameters must be non-negative")


@dataclass(frozen=True)
class Action:
    kind: str                 # serve | upgrade
    device: str | None = None

    def __post_init__(self):
        if self.kind not in ("serve", "upgrade"):
            raise ValueError(f"unknown action kind {self.kind!r}")
        if self.kind == "upgrade" and self.device not in DEVICES:
            raise ValueError(f"upgrade needs a device in {DEVICES}")


SERVE = Action("serve")
UPGRADES = tuple(Action("upgrade", d) for d in DEVICES)


@dataclass(frozen=True)
class ScheduleState:
    stream: tuple[str, ...]
    t: int = 1                       # 1-based round about to be played
    levels: tuple[int, int, int] = (0, 0, 0)
    profit: float = 0.0

    @property
    def finished(self) -> bool:
        return self.t > len(self.stream)

    @property
    def request(self) -> str:
        return self.stream[self.t - 1]


def make_state(stream: Sequence[str]) -> ScheduleState:
    stream = tuple(stream)
    for r in stream:
        if r not in GOODS:
            raise ValueError(f"unknown request {r!r}; expected one of {GOODS}")
    return ScheduleState(stream=stream)


def legal_actions(state: ScheduleState, economy: Economy) -> tuple[Action, ...]:
    """Serve the round's request, or upgrade any device below the cap."""
    out = [SERVE]
    for i, act in enumerate(UPGRADES):
        if state.levels[i] < economy.max_level:
            out.append(act)
    return tuple(out)


def immediate_reward(levels: tuple[int, int, int], request: str, action: Action,
                     economy: Economy) -> float:
    if action.kind == "serve":
        return economy.base_profit + economy.upgrade_increment * levels[_GOOD_DEVICE[request]]
    return -economy.upgrade_cost


def step(state: ScheduleState, action: Action, economy: Economy):
    """Apply one action; upgrades take effect from the next round."""
    if state.finished:
        raise IllegalActionError("episode already finished")
    reward = immediate_reward(state.levels, state.request, action, economy)
    levels = state.levels
    if action.kind == "upgrade":
        i = _DEVICE_INDEX[action.device]
        if levels[i] >= economy.max_level:
            raise IllegalActionError(
                f"device {action.device} already at max level {economy.max_level}")
        levels = levels[:i] + (levels[i] + 1,) + levels[i + 1:]
    new_state = replace(state, t=state.t + 1, levels=levels,
                        profit=state.profit + reward)
    return new_state, reward


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------

def policy_msip(state: ScheduleState, economy: Economy) -> Action:
    """Maximize the immediate reward; ties prefer serving, then devices in
    a < b < c order (the legal-action ordering)."""
    acts = legal_actions(state, economy)
    rewards = [immediate_reward(state.levels, state.request, a, economy)
               for a in acts]
    return acts[int(np.argmax(rewards))]


def policy_rs(state: ScheduleState, economy: Economy,
              rng: np.random.Generator) -> Action:
    acts = legal_actions(state, economy)
    return acts[int(rng.integers(len(acts)))]


def _level_states(max_level: int):
    return list(product(range(max_level + 1), repeat=3))


def _next_levels(levels, action: Action):
    if action.kind == "serve":
        return levels
    i = _DEVICE_INDEX[action.device]
    return levels[:i] + (levels[i] + 1,) + levels[i + 1:]


def mlcp_plan(stream: Sequence[str], economy: Economy) -> tuple[list[Action], float]:
    """Exact backward-induction plan for a known request stream.

    Returns (actions, optimal total). Forward extraction walks the value
    function preferring Serve over Upgrade and lower device ids at exact
    value ties, which postpones upgrades as late as optimality allows.
    """
    stream = tuple(make_state(stream).stream)
    horizon = len(stream)
    states = _level_states(economy.max_level)
    value_next = {lv: 0.0 for lv in states}
    values = [value_next]
    for t in range(horizon - 1, -1, -1):
        layer = {}
        for lv in states:
            best = -np.inf
            fake = ScheduleState(stream=stream, t=t + 1, levels=lv)
            for act in legal_actions(fake, economy):
                q = (immediate_reward(lv, stream[t], act, economy)
                     + values[0][_next_levels(lv, act)])
                if q > best:
                    best = q
            layer[lv] = best
        values.insert(0, layer)

    actions: list[Action] = []
    levels = (0, 0, 0)
    for t in range(horizon):
        fake = ScheduleState(stream=stream, t=t + 1, levels=levels)
        best_q = -np.inf
        best_act = None
        for act in legal_actions(fake, economy):
            q = (immediate_reward(levels, stream[t], act, economy)
                 + values[t + 1][_next_levels(levels, act)])
            if q > best_q:
                best_q = q
                best_act = act
        actions.append(best_act)
        levels = _next_levels(levels, best_act)
    return actions, values[0][(0, 0, 0)]


def mlcp_policy(stream: Sequence[str], economy: Economy) -> Callable[[ScheduleState], Action]:
    plan, _ = mlcp_plan(stream, economy)

    def policy(state: ScheduleState) -> Action:
        return plan[state.t - 1]

    return policy


def mlcp_distribution_policy(distribution: Mapping[str, float], horizon: int,
                             economy: Economy) -> Callable[[ScheduleState], Action]:
    """MLCP without foreknowledge: plan against a request distribution; the
    current round's request is observed before acting, future ones are not."""
    probs = {g: float(distribution.get(g, 0.0)) for g in GOODS}
    total = sum(probs.values())
    if total <= 0:
        raise ValueError("distribution must have positive mass")
    probs = {g: p / total for g, p in probs.items()}
    states = _level_states(economy.max_level)
    expected = [{lv: 0.0 for lv in states}]
    for _ in range(horizon):
        prev = expected[0]
        layer = {}
        for lv in states:
            acc = 0.0
            for g, p in probs.items():
                best = -np.inf
                fake = ScheduleState(stream=(g,), t=1, levels=lv)
                for act in legal_actions(fake, economy):
                    q = immediate_reward(lv, g, act, economy) + prev[_next_levels(lv, act)]
                    best = max(best, q)
                acc += p * best
            layer[lv] = acc
        expected.insert(0, layer)

    def policy(state: ScheduleState) -> Action:
        remaining = len(state.stream) - state.t
        cont = expected[max(0, horizon - remaining)]
        best_q = -np.inf
        best_act = SERVE
        for act in legal_actions(state, economy):
            q = (immediate_reward(state.levels, state.request, act, economy)
                 + cont[_next_levels(state.levels, act)])
            if q > best_q:
                best_q = q
                best_act = act
        return best_act

    return policy


# ---------------------------------------------------------------------------
# Episodes and oracles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EpisodeRow:
    round: int
    request: str
    action: Action
    reward: float
    cumulative: float

    @property
    def action_label(self) -> str:
        """Production-table label: the good when serving, the device when
        upgrading."""
        return self.request if self.action.kind == "serve" else self.action.device


def run_episode(policy: Callable[[ScheduleState], Action], stream: Sequence[str],
                economy: Economy) -> list[EpisodeRow]:
    state = make_state(stream)
    rows: list[EpisodeRow] = []
    while not state.finished:
        request = state.request
        action = policy(state)
        state, reward = step(state, action, economy)
        rows.append(EpisodeRow(round=state.t - 1, request=request, action=action,
                               reward=reward, cumulative=state.profit))
    return rows


def episode_total(rows: Sequence[EpisodeRow]) -> float:
    return rows[-1].cumulative if rows else 0.0


def rs_expected_total(stream: Sequence[str], economy: Economy) -> float:
    """Exact expected total of the uniform-random policy (backward DP)."""
    stream = tuple(make_state(stream).stream)
    states = _level_states(economy.max_level)
    nxt = {lv: 0.0 for lv in states}
    for t in range(len(stream) - 1, -1, -1):
        cur = {}
        for lv in states:
            fake = ScheduleState(stream=stream, t=t + 1, levels=lv)
            acts = legal_actions(fake, economy)
            cur[lv] = sum(immediate_reward(lv, stream[t], a, economy)
                          + nxt[_next_levels(lv, a)] for a in acts) / len(acts)
        nxt = cur
    return nxt[(0, 0, 0)]


def rs_mc_mean(stream: Sequence[str], economy: Economy, episodes: int,
               seed: int) -> tuple[float, float]:
    """Monte-Carlo mean and standard error of the RS policy total."""
    stream = tuple(make_state(stream).stream)
    horizon = len(stream)
    req_dev = [_GOOD_DEVICE[g] for g in stream]
    max_level = economy.max_level
    base, cost, inc = economy.base_profit, economy.upgrade_cost, economy.upgrade_increment
    u = np.random.default_rng(seed).random((episodes, horizon))
    totals = np.empty(episodes)
    for e in range(episodes):
        lv = [0, 0, 0]
        tot = 0.0
        row = u[e]
        for t in range(horizon):
            avail = [d for d in range(3) if lv[d] < max_level]
            pick = int(row[t] * (1 + len(avail)))
            if pick == 0:
                tot += base + inc * lv[req_dev[t]]
            else:
                d = avail[pick - 1]
                tot -= cost
                lv[d] += 1
        totals[e] = tot
    mean = float(totals.mean())
    stderr = float(totals.std(ddof=1) / np.sqrt(episodes))
    return mean, stderr


def brute_force_total(stream: Sequence[str], economy: Economy) -> float:
    """Best total over every legal action sequence, by direct enumeration of
    all 4^H sequences (vectorized). Independent of the DP recursion."""
    stream = tuple(make_state(stream).stream)
    horizon = len(stream)
    n_seq = 4 ** horizon
    seqs = np.arange(n_seq, dtype=np.int64)
    levels = [np.zeros(n_seq, dtype=np.int64) for _ in range(3)]
    total = np.zeros(n_seq)
    illegal = np.zeros(n_seq, dtype=bool)
    for t, req in enumerate(stream):
        digit = (seqs // (4 ** t)) % 4
        serve_reward = economy.base_profit + economy.upgrade_increment * levels[_GOOD_DEVICE[req]]
        total += np.where(digit == 0, serve_reward, -economy.upgrade_cost)
        for d in range(3):
            mask = digit == d + 1
            illegal |= mask & (levels[d] >= economy.max_level)
            levels[d] = levels[d] + mask
    total[illegal] = -np.inf
    return float(total.max())


def write_episode_csv(rows_by_policy: Mapping[str, Sequence[EpisodeRow]],
                      path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["policy", "round", "request", "action", "reward",
                         "cumulative"])
        for policy in sorted(rows_by_policy):
            for row in rows_by_policy[policy]:
                writer.writerow([policy, row.round, row.request, row.action_label,
                                 repr(float(row.reward)),
                                 repr(float(row.cumulative))])
