"""Equation search: policy rollouts, beam exploration, the uniform random
baseline, and an exhaustive reachability oracle.

All searches run in decode space over a cloned operand dictionary: sample a
triplet, execute it, compare against the answer, push the intermediate, and
continue until a match or the step budget. Rewards are -1 per non-matching
step and +1 on the matching step (a terminal-only mode is available). An
invalid arithmetic step (division by zero, non-finite result) ends its
episode - or kills just its beam - with reward -1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .equation import (
    OPERATORS,
    CapacityError,
    InvalidStepError,
    OperandDict,
    OperatorVocab,
    TripletStep,
    apply_op,
    values_close,
)
from .model import (
    START_OP,
    PolicyParams,
    StepDistributions,
    decode_step,
    sample_k_without_replacement,
    sample_triplet,
    top_k_triplets,
)


@dataclass
class SearchBudget:
    """Step and width limits: t_max decode steps, beam width w, and the
    random baseline's k parallel paths of depth d."""

    t_max: int = 40
    beam_width: int = 5
    k: int = 5
    d: int = 40
    reward_mode: str = "per_step"  # or "terminal": 0 everywhere except the end

    def __post_init__(self):
        if min(self.t_max, self.beam_width, self.d) < 1 or self.k < 0:
            raise ValueError("budget fields must be positive (k may be 0)")
        if self.reward_mode not in ("per_step", "terminal"):
            raise ValueError(f"unknown reward mode {self.reward_mode!r}")


@dataclass
class Trajectory:
    """One decoded episode: steps, their log-probabilities, per-step rewards,
    and whether/where the answer was hit. match_step indexes into steps."""

    steps: list[TripletStep]
    log_probs: list[float]
    rewards: list[float]
    matched: bool
    match_step: int | None = None

    @property
    def cum_log_prob(self) -> float:
        return float(sum(self.log_probs))


def _rewards_for(n_steps: int, matched: bool, mode: str) -> list[float]:
    if mode == "terminal":
        rewards = [0.0] * n_steps
        if n_steps:
            rewards[-1] = 1.0 if matched else -1.0
        return rewards
    rewards = [-1.0] * n_steps
    if matched and n_steps:
        rewards[-1] = 1.0
    return rewards


def _masked_state(state: np.ndarray, masks: np.ndarray | None, t: int) -> np.ndarray:
    if masks is None:
        return state
    return state * masks[t - 1]


def rollout(params: PolicyParams, h0: np.ndarray, opdict: OperandDict,
            answer: float, budget: SearchBudget, rng: np.random.Generator,
            *, state_masks: np.ndarray | None = None, greedy: bool = False,
            answer_eps: float = 1e-4) -> Trajectory:
    """Single sampled (or greedy argmax) decoding episode."""
    d = opdict.clone()
    state = h0
    prev_op = START_OP
    steps: list[TripletStep] = []
    log_probs: list[float] = []
    matched = False
    for t in range(1, budget.t_max + 1):
        dists = decode_step(params, _masked_state(state, state_masks, t),
                            prev_op, d.size)
        if greedy:
            op, left, right, prob = top_k_triplets(dists, 1)[0]
            logp = float(np.log(prob))
        else:
            op, left, right, logp = sample_triplet(dists, rng)
        log_probs.append(logp)
        sym = OPERATORS[op]
        try:
            value = apply_op(sym, d.value(left), d.value(right))
        except InvalidStepError:
            steps.append(TripletStep(sym, left, right, float("nan")))
            break
        steps.append(TripletStep(sym, left, right, value))
        if values_close(value, answer, answer_eps):
            matched = True
            break
        try:
            d.push(value, t)
        except CapacityError:
            break
        prev_op = op
        state = dists.h_or[op]
    return Trajectory(steps, log_probs, _rewards_for(len(steps), matched, budget.reward_mode),
                      matched, len(steps) - 1 if matched else None)


# -- beam exploration -----------------------------------------------------------

@dataclass
class Beam:
    """One candidate decoding path and everything needed to extend it."""

    index: int
    opdict: OperandDict
    state: np.ndarray
    prev_op: int
    steps: list[TripletStep] = field(default_factory=list)
    log_probs: list[float] = field(default_factory=list)
    cum_log_prob: float = 0.0
    alive: bool = True
    matched: bool = False
    match_step: int | None = None

    def child(self, index: int) -> "Beam":
        return Beam(index=index, opdict=self.opdict.clone(), state=self.state,
                    prev_op=self.prev_op, steps=list(self.steps),
                    log_probs=list(self.log_probs), cum_log_prob=self.cum_log_prob)


def _beam_trajectory(beam: Beam, mode: str) -> Trajectory:
    return Trajectory(list(beam.steps), list(beam.log_probs),
                      _rewards_for(len(beam.steps), beam.matched, mode),
                      beam.matched, beam.match_step)


def select_beam(beams: list[Beam]) -> Beam:
    """Earliest positive reward wins; ties broken by higher cumulative
    log-probability, then by lowest beam index. With no matched beam, the
    highest log-probability beam is returned."""
    matched = [b for b in beams if b.matched]
    if matched:
        return min(matched, key=lambda b: (b.match_step, -b.cum_log_prob, b.index))
    return min(beams, key=lambda b: (-b.cum_log_prob, b.index))


def beam_explore(params: PolicyParams, h0: np.ndarray, opdict: OperandDict,
                 answer: float, budget: SearchBudget, rng: np.random.Generator,
                 *, state_masks: np.ndarray | None = None, greedy: bool = False,
                 answer_eps: float = 1e-4) -> tuple[Trajectory, list[Beam]]:
    """Maintain up to w sampled paths; matched beams freeze immediately and
    stop consuming budget. Each live beam proposes w triplets per step (drawn
    without replacement from its joint, or the top w when greedy); the w best
    candidates by cumulative log-probability survive. Returns the selected
    trajectory and every finished beam."""
    w = budget.beam_width
    counter = 0
    root = Beam(index=counter, opdict=opdict.clone(), state=h0, prev_op=START_OP)
    live = [root]
    finished: list[Beam] = []
    for t in range(1, budget.t_max + 1):
        if not live:
            break
        candidates: list[Beam] = []
        for beam in live:
            dists = decode_step(params, _masked_state(beam.state, state_masks, t),
                                beam.prev_op, beam.opdict.size)
            if greedy:
                proposals = top_k_triplets(dists, w)
            else:
                proposals = sample_k_without_replacement(dists, w, rng)
            for op, left, right, prob in proposals:
                counter += 1
                child = beam.child(counter)
                logp = float(np.log(prob))
                child.log_probs.append(logp)
                child.cum_log_prob += logp
                sym = OPERATORS[op]
                try:
                    value = apply_op(sym, child.opdict.value(left),
                                     child.opdict.value(right))
                except InvalidStepError:
                    child.steps.append(TripletStep(sym, left, right, float("nan")))
                    child.alive = False
                    finished.append(child)
                    continue
                child.steps.append(TripletStep(sym, left, right, value))
                if values_close(value, answer, answer_eps):
                    child.matched = True
                    child.match_step = len(child.steps) - 1
                    child.alive = False
                    finished.append(child)
                else:
                    try:
                        child.opdict.push(value, t)
                    except CapacityError:
                        finished.append(child)  # cannot extend; still selectable
                        continue
                    child.prev_op = op
                    child.state = dists.h_or[op]
                    candidates.append(child)
        candidates.sort(key=lambda b: (-b.cum_log_prob, b.index))
        live = candidates[:w]
    finished.extend(live)
    matched = [b for b in finished if b.matched]
    pool = matched if matched else ([b for b in finished if b.alive] or finished)
    selected = select_beam(pool)
    return _beam_trajectory(selected, budget.reward_mode), finished


# -- baselines and oracle ---------------------------------------------------------

def random_equation_sampling(opdict: OperandDict, answer: float,
                             budget: SearchBudget, rng: np.random.Generator,
                             *, ops: OperatorVocab = OperatorVocab(),
                             answer_eps: float = 1e-4) -> list[TripletStep] | None:
    """Uniform random search over k independent paths of length <= d.

    Each step draws an operator and two slots uniformly; results grow the
    path's own dictionary. The first path to reach the answer is returned.
    """
    n_ops = len(ops)
    for _ in range(budget.k):
        d = opdict.clone()
        steps: list[TripletStep] = []
        for t in range(1, budget.d + 1):
            op = ops.symbols[rng.integers(n_ops)]
            left = int(rng.integers(d.size))
            right = int(rng.integers(d.size))
            try:
                value = apply_op(op, d.value(left), d.value(right))
            except InvalidStepError:
                break
            steps.append(TripletStep(op, left, right, value))
            if values_close(value, answer, answer_eps):
                return steps
            try:
                d.push(value, t)
            except CapacityError:
                break
    return None


def brute_force_oracle(opdict: OperandDict, ops: OperatorVocab, max_steps: int,
                       answer: float, tol: float = 1e-4) -> list[TripletStep] | None:
    """Exhaustive breadth-first enumeration over all operator/slot choices,
    intermediates included; returns a minimal-length triplet sequence whose
    value matches the answer within tol, or None.

    Exact but exponential: keep max_steps small (<= 3). States reaching an
    already-seen multiset of values at equal-or-later depth are pruned, which
    cannot hide a shorter solution because exploration is level-by-level.
    """
    start_values = tuple(opdict.values())
    level: list[tuple[tuple[float, ...], tuple[TripletStep, ...]]] = \
        [(start_values, ())]
    seen = {tuple(sorted(start_values))}
    for depth in range(1, max_steps + 1):
        next_level = []
        for values, steps in level:
            n = len(values)
            for op in ops.symbols:
                for left in range(n):
                    for right in range(n):
                        try:
                            value = apply_op(op, values[left], values[right])
                        except InvalidStepError:
                            continue
                        step = TripletStep(op, left, right, value)
                        if values_close(value, answer, tol):
                            return list(steps) + [step]
                        if depth == max_steps:
                            continue
                        new_values = values + (value,)
                        key = tuple(sorted(new_values))
                        if key in seen:
                            continue
                        seen.add(key)
                        next_level.append((new_values, steps + (step,)))
        level = next_level
    return None
