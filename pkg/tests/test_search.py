"""Search behavior: rollouts, beam selection, random baseline, oracle."""

import math

import numpy as np
import pytest

import mwpsolve.search as search
from mwpsolve.equation import OperandDict, OperatorVocab, TripletStep, evaluate_triplets
from mwpsolve.model import ModelConfig, PolicyParams
from mwpsolve.search import (
    Beam,
    SearchBudget,
    Trajectory,
    beam_explore,
    brute_force_oracle,
    random_equation_sampling,
    rollout,
    select_beam,
)

CONSTS = (1.0, math.pi)
CFG = ModelConfig(vocab_size=10, emb_dim=4, hidden_dim=6, capacity=16)
OPS = OperatorVocab()


def make_dict(numbers, capacity=16):
    return OperandDict.initial(numbers, CONSTS, capacity)


@pytest.fixture(scope="module")
def params():
    return PolicyParams.init(CFG, seed=0)


@pytest.fixture
def h0():
    return np.zeros(CFG.hidden_dim)


def force_samples(monkeypatch, script):
    """Replace triplet sampling with a scripted sequence of (op, l, r)."""
    queue = list(script)

    def fake(dists, rng):
        op, left, right = queue.pop(0)
        return op, left, right, float(np.log(0.5))

    monkeypatch.setattr(search, "sample_triplet", fake)


class TestRollout:
    def test_forced_division_matches_at_step_one(self, monkeypatch, params, h0):
        force_samples(monkeypatch, [(3, 0, 1)])  # ops are (+, -, *, /)
        traj = rollout(params, h0, make_dict([5.0, 10.0, 1.0]), 0.5,
                       SearchBudget(t_max=8), np.random.default_rng(0))
        assert traj.matched and traj.match_step == 0
        assert traj.rewards == [1.0]
        assert traj.steps == [TripletStep("/", 0, 1, 0.5)]

    def test_forced_two_step_rewards(self, monkeypatch, params, h0):
        # (2.0 * 3.0) then 4.0 + the intermediate at slot 5
        force_samples(monkeypatch, [(2, 2, 1), (0, 0, 5)])
        traj = rollout(params, h0, make_dict([4.0, 3.0, 2.0]), 10.0,
                       SearchBudget(t_max=8), np.random.default_rng(0))
        assert traj.matched
        assert traj.rewards == [-1.0, 1.0]
        assert [s.result for s in traj.steps] == [6.0, 10.0]

    def test_budget_exhaustion_unmatched(self, params, h0):
        traj = rollout(params, h0, make_dict([2.0]), 1e9,
                       SearchBudget(t_max=1), np.random.default_rng(1))
        assert not traj.matched
        assert traj.rewards == [-1.0]
        assert len(traj.steps) == 1

    def test_invalid_step_terminates_episode(self, monkeypatch, params, h0):
        # 2.0 - 2.0 = 0 (pushed at slot 3), then divide by it
        force_samples(monkeypatch, [(1, 0, 0), (3, 0, 3)])
        traj = rollout(params, h0, make_dict([2.0]), 123.0,
                       SearchBudget(t_max=9), np.random.default_rng(0))
        assert not traj.matched
        assert len(traj.steps) == 2
        assert math.isnan(traj.steps[-1].result)
        assert traj.rewards == [-1.0, -1.0]

    def test_terminal_reward_mode(self, monkeypatch, params, h0):
        force_samples(monkeypatch, [(2, 2, 1), (0, 0, 5)])
        traj = rollout(params, h0, make_dict([4.0, 3.0, 2.0]), 10.0,
                       SearchBudget(t_max=8, reward_mode="terminal"),
                       np.random.default_rng(0))
        assert traj.rewards == [0.0, 1.0]

    def test_matched_trajectory_reevaluates(self, params, h0):
        """Any matched rollout must re-evaluate to the answer via the
        independent triplet evaluator."""
        rng = np.random.default_rng(42)
        budget = SearchBudget(t_max=3)
        hits = 0
        for trial in range(300):
            numbers = [float(rng.integers(1, 10)) for _ in range(2)]
            d = make_dict(numbers)
            answer = float(rng.integers(1, 30))
            traj = rollout(params, h0, d, answer, budget,
                           np.random.default_rng(1000 + trial))
            if traj.matched:
                hits += 1
                value = evaluate_triplets(traj.steps, d)
                assert abs(value - answer) <= max(1e-4, 1e-4 * abs(answer))
                assert traj.rewards[-1] == 1.0
        assert hits > 0

    def test_deterministic_given_seed(self, params, h0):
        budget = SearchBudget(t_max=4)
        a = rollout(params, h0, make_dict([3.0, 7.0]), 99.0, budget,
                    np.random.default_rng(5))
        b = rollout(params, h0, make_dict([3.0, 7.0]), 99.0, budget,
                    np.random.default_rng(5))
        assert a.steps == b.steps and a.log_probs == b.log_probs

    def test_greedy_uses_no_rng(self, params, h0):
        budget = SearchBudget(t_max=3)
        a = rollout(params, h0, make_dict([3.0, 7.0]), 99.0, budget,
                    np.random.default_rng(0), greedy=True)
        b = rollout(params, h0, make_dict([3.0, 7.0]), 99.0, budget,
                    np.random.default_rng(77), greedy=True)
        assert a.steps == b.steps


class TestBeamSelection:
    def _beam(self, index, matched, match_step, logp):
        b = Beam(index=index, opdict=make_dict([1.0]), state=np.zeros(2),
                 prev_op=-1)
        b.matched = matched
        b.match_step = match_step
        b.cum_log_prob = logp
        b.steps = [TripletStep("+", 0, 0, 2.0)] * ((match_step or 0) + 1)
        return b

    def test_earliest_match_wins(self):
        beams = [self._beam(0, True, 2, -1.0), self._beam(1, True, 1, -9.0)]
        assert select_beam(beams).index == 1

    def test_tie_broken_by_log_prob_then_index(self):
        beams = [self._beam(0, True, 1, -5.0), self._beam(1, True, 1, -1.0),
                 self._beam(2, True, 1, -1.0)]
        assert select_beam(beams).index == 1

    def test_no_match_highest_log_prob(self):
        beams = [self._beam(0, False, None, -5.0), self._beam(1, False, None, -2.0)]
        assert select_beam(beams).index == 1


class TestBeamExplore:
    def test_selected_matched_when_any_matched(self, params, h0):
        budget = SearchBudget(t_max=3, beam_width=4)
        found = 0
        for trial in range(120):
            d = make_dict([4.0, 2.0])
            traj, beams = beam_explore(params, h0, d, 8.0, budget,
                                       np.random.default_rng(trial))
            if any(b.matched for b in beams):
                found += 1
                assert traj.matched
                value = evaluate_triplets(traj.steps, d)
                assert abs(value - 8.0) <= 1e-3
        assert found > 0

    def test_selected_is_pareto_optimal(self, params, h0):
        budget = SearchBudget(t_max=3, beam_width=3)
        for trial in range(60):
            traj, beams = beam_explore(params, h0, make_dict([4.0, 2.0]), 8.0,
                                       budget, np.random.default_rng(500 + trial))
            matched = [b for b in beams if b.matched]
            if not matched:
                continue
            best_step = min(b.match_step for b in matched)
            assert traj.match_step == best_step
            contenders = [b for b in matched if b.match_step == best_step]
            assert traj.cum_log_prob == max(b.cum_log_prob for b in contenders)

    def test_deterministic_given_seed(self, params, h0):
        budget = SearchBudget(t_max=3, beam_width=3)
        a, _ = beam_explore(params, h0, make_dict([4.0, 2.0]), 8.0, budget,
                            np.random.default_rng(9))
        b, _ = beam_explore(params, h0, make_dict([4.0, 2.0]), 8.0, budget,
                            np.random.default_rng(9))
        assert a.steps == b.steps

    def test_matched_beams_freeze(self, params, h0):
        """No beam keeps decoding past its match."""
        budget = SearchBudget(t_max=4, beam_width=4)
        for trial in range(40):
            _, beams = beam_explore(params, h0, make_dict([4.0, 2.0]), 8.0,
                                    budget, np.random.default_rng(trial))
            for b in beams:
                if b.matched:
                    assert b.match_step == len(b.steps) - 1

    def test_wider_beams_discover_no_less(self, params, h0):
        """Monte-Carlo: discovery frequency with w=5 is at least that of w=1
        on an instance needing a two-step composition."""
        answer = 16.0  # from [3, 5, 1, pi]: e.g. (3+5)+(3+5) or 3*5+1
        runs = 400
        found = {1: 0, 5: 0}
        for w in (1, 5):
            budget = SearchBudget(t_max=2, beam_width=w)
            for trial in range(runs):
                traj, _ = beam_explore(params, h0, make_dict([3.0, 5.0]), answer,
                                       budget, np.random.default_rng(trial))
                found[w] += traj.matched
        assert found[5] >= found[1]
        assert found[5] > 0


class TestRandomEquationSampling:
    def test_answer_equal_to_slot_still_needs_an_op(self):
        d = make_dict([5.0, 10.0, 1.0])
        budget = SearchBudget(k=5, d=40)
        for seed in range(30):
            steps = random_equation_sampling(d, 5.0, budget,
                                             np.random.default_rng(seed))
            if steps is not None:
                assert len(steps) >= 1
                assert abs(evaluate_triplets(steps, d) - 5.0) <= 1e-3
                break
        else:
            pytest.fail("uniform search never reached a value already in the dict")

    def test_k_zero_returns_none(self):
        d = make_dict([5.0])
        budget = SearchBudget(k=0, d=40)
        assert random_equation_sampling(d, 5.0, budget, np.random.default_rng(0)) is None

    def test_never_finds_oracle_unreachable(self):
        """Depth-matched agreement: anything found at depth d is reachable at
        depth d according to the exhaustive oracle."""
        rng = np.random.default_rng(7)
        for trial in range(40):
            numbers = [float(rng.integers(1, 6)) for _ in range(2)]
            d = make_dict(numbers)
            answer = float(rng.integers(1, 40))
            budget = SearchBudget(k=3, d=2)
            steps = random_equation_sampling(d, answer, budget,
                                             np.random.default_rng(trial))
            if steps is not None:
                oracle = brute_force_oracle(d, OPS, len(steps), answer)
                assert oracle is not None

    def test_unreachable_always_none(self):
        d = OperandDict.initial([], CONSTS, capacity=16)
        assert brute_force_oracle(d, OPS, 1, 42.0) is None
        budget = SearchBudget(k=5, d=1)
        for seed in range(200):
            assert random_equation_sampling(d, 42.0, budget,
                                            np.random.default_rng(seed)) is None


class TestBruteForceOracle:
    def test_candy_minimal_length_one(self):
        steps = brute_force_oracle(make_dict([5.0, 10.0, 1.0]), OPS, 3, 0.5)
        assert steps == [TripletStep("/", 0, 1, 0.5)]

    def test_flowers_minimal_length_two(self):
        d = make_dict([4.0, 3.0, 2.0])
        assert brute_force_oracle(d, OPS, 1, 10.0) is None
        steps = brute_force_oracle(d, OPS, 2, 10.0)
        assert steps is not None and len(steps) == 2
        assert evaluate_triplets(steps, d) == 10.0

    def test_constants_only_unreachable_at_depth_one(self):
        d = OperandDict.initial([], CONSTS, capacity=16)
        assert brute_force_oracle(d, OPS, 1, 42.0) is None

    def test_depth_one_enumeration_is_exact(self):
        """Cross-check the oracle against a direct enumeration of all
        4 * n^2 one-step results."""
        d = make_dict([2.0, 7.0])
        values = d.values()
        reachable = set()
        for sym in OPS.symbols:
            for a in values:
                for b in values:
                    try:
                        reachable.add(search.apply_op(sym, a, b))
                    except Exception:
                        pass
        for target in list(reachable)[:25]:
            assert brute_force_oracle(d, OPS, 1, target, tol=1e-9) is not None
        assert brute_force_oracle(d, OPS, 1, 1234.5, tol=1e-9) is None

    def test_returned_sequence_evaluates(self):
        d = make_dict([3.0, 5.0])
        steps = brute_force_oracle(d, OPS, 3, 16.0)
        assert steps is not None
        assert abs(evaluate_triplets(steps, d) - 16.0) <= 1e-3


def test_budget_validation():
    with pytest.raises(ValueError):
        SearchBudget(t_max=0)
    with pytest.raises(ValueError):
        SearchBudget(reward_mode="bogus")
    assert SearchBudget(k=0).k == 0


def test_trajectory_cum_log_prob():
    t = Trajectory([], [-0.5, -1.5], [], False)
    assert t.cum_log_prob == -2.0
