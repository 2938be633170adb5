"""Training: policy-gradient equation discovery (step 1), noisy dataset
generation, supervised distillation (step 2), and evaluation.

Reproducibility contract: all randomness derives from the run seed. Each
instance gets a generator seeded by (run seed, epoch, crc32(problem id)) that
draws, in this order, the encoder embedding dropout masks, the decoder state
dropout masks, and then the search samples. The gradient pass replays the
selected trajectory's actions through the same tape that encoded the problem,
reusing the same masks, so replayed probabilities equal the searched ones.
"""

from __future__ import annotations

import logging
import time
import zlib
from dataclasses import dataclass, field, fields

import numpy as np

from .autodiff import Tape, Tensor, dropout_mask
from .checkpoint import load_bundle, save_bundle
from .corpus import (
    EncodedProblem,
    PreprocessConfig,
    Problem,
    Vocab,
    encode_for_model,
    init_operand_dict,
)
from .equation import (
    DEFAULT_CAPACITY,
    OPERATORS,
    OperandDict,
    TripletStep,
    UnresolvableLeafError,
    linearize,
    parse_equation,
    render_equation,
    values_close,
)
from .model import (
    START_OP,
    ModelConfig,
    PolicyParams,
    encode,
    left_head,
    operator_head,
    right_head,
)
from .optim import AdamState, NonFiniteGradientError, adam_update
from .search import SearchBudget, Trajectory, beam_explore, rollout

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; parameters from the last good state were saved
    if a checkpoint directory was configured."""


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    learning_rate: float = 0.001
    lr_decay: float = 0.7
    lr_decay_every: int = 75
    dropout: float = 0.5
    weight_decay: float = 1e-5
    beam_width: int = 5
    embedding_dim: int = 128
    hidden_dim: int = 512
    seed: int = 0
    ce_weight: float = 1.0
    use_reward_baseline: bool = False
    dropout_encoder_emb: bool = True
    dropout_decoder_state: bool = True

    def __post_init__(self):
        for name in ("epochs", "batch_size", "learning_rate", "lr_decay",
                     "lr_decay_every", "beam_width", "embedding_dim", "hidden_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.lr_decay < 1.0:
            raise ValueError("lr_decay must be in (0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Stepped decay: initial_lr * decay^(epoch // period)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.learning_rate * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


@dataclass
class Metrics:
    equation_generation_accuracy: float | None = None
    answer_accuracy: float | None = None

    def __post_init__(self):
        for v in (self.equation_generation_accuracy, self.answer_accuracy):
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"accuracy {v} outside [0, 1]")


@dataclass
class LabelledInstance:
    """A problem paired with a correct-answer triplet program."""

    problem: Problem
    steps: list[TripletStep]
    equation: str
    source: str  # "discovered" | "gold"


@dataclass
class TrainInstance:
    """Everything the loop needs per problem: encoded text, the initial
    operand dictionary, and optional gold steps (making it a D1 member)."""

    enc: EncodedProblem
    opdict: OperandDict
    problem: Problem
    gold_steps: list[TripletStep] | None = None


def prepare_instances(pairs, vocab: Vocab, pre_cfg: PreprocessConfig,
                      capacity: int = DEFAULT_CAPACITY,
                      use_gold: bool = False) -> tuple[list[TrainInstance], int]:
    """Build train instances from (Problem, PreprocessedProblem) pairs.

    With use_gold, equations are parsed and linearized into gold steps;
    instances whose gold equation cannot be grounded in their operand slots
    (or is a bare number) fall back to weak-only, and the count of such
    fallbacks is returned.
    """
    instances, skipped = [], 0
    for problem, pp in pairs:
        enc = encode_for_model(problem, pp, vocab)
        opdict = init_operand_dict(pp, pre_cfg, capacity)
        gold = None
        if use_gold and problem.equation:
            try:
                gold = linearize(parse_equation(problem.equation), opdict,
                                 pre_cfg.answer_eps) or None
            except (ValueError, UnresolvableLeafError):
                gold = None
            if gold is None:
                skipped += 1
        instances.append(TrainInstance(enc, opdict, problem, gold))
    return instances, skipped


# -- dropout mask bookkeeping ---------------------------------------------------

@dataclass
class DropoutMasks:
    emb: np.ndarray | None = None    # (seq_len, emb_dim)
    state: np.ndarray | None = None  # (n_steps, hidden_dim)


def draw_masks(rng: np.random.Generator, cfg: TrainConfig, seq_len: int,
               n_steps: int) -> DropoutMasks:
    """Draws embedding masks then state masks (the documented order)."""
    emb = state = None
    if cfg.dropout > 0.0 and cfg.dropout_encoder_emb:
        emb = dropout_mask((seq_len, cfg.embedding_dim), cfg.dropout, rng)
    if cfg.dropout > 0.0 and cfg.dropout_decoder_state:
        state = dropout_mask((n_steps, cfg.hidden_dim), cfg.dropout, rng)
    return DropoutMasks(emb, state)


def instance_seed(run_seed: int, epoch: int, problem_id: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([run_seed, epoch, zlib.crc32(problem_id.encode())])


# -- losses ----------------------------------------------------------------------

def replay_log_probs(tape: Tape, params: PolicyParams, h0: Tensor, steps,
                     init_size: int,
                     state_masks: np.ndarray | None = None) -> list[Tensor]:
    """Teacher-forced re-run of a triplet sequence, returning one joint
    log-probability tensor per step. The dictionary grows by exactly one slot
    per completed step, so step t sees init_size + t - 1 live slots."""
    state = h0
    prev_op = START_OP
    lps = []
    for t, step in enumerate(steps, start=1):
        h_in = state if state_masks is None else tape.dropout(state, state_masks[t - 1])
        op_id = OPERATORS.index(step.op)
        dict_size = init_size + t - 1
        op_probs, h_op = operator_head(tape, params, prev_op, h_in)
        l_probs, h_ol = left_head(tape, params, op_id, h_op, dict_size)
        r_probs, h_or = right_head(tape, params, op_id, h_op, h_ol, dict_size)
        lp = tape.add(tape.add(tape.log(tape.pick(op_probs, op_id)),
                               tape.log(tape.pick(l_probs, step.left))),
                      tape.log(tape.pick(r_probs, step.right)))
        lps.append(lp)
        state = h_or
        prev_op = op_id
    return lps


def reinforce_loss(tape: Tape, params: PolicyParams, h0: Tensor,
                   traj: Trajectory, init_size: int,
                   state_masks: np.ndarray | None = None,
                   baseline: float = 0.0) -> Tensor:
    """Single-sample policy-gradient loss for one trajectory.

    The step-t action probability is the cumulative product of the chained
    distributions up to t, so the loss -sum_t R_t * sum_{i<=t} log p(y_i)
    is assembled in the equivalent suffix form -sum_i (sum_{t>=i} R_t) log p(y_i).
    """
    if not traj.steps:
        raise ValueError("trajectory has no steps")
    lps = replay_log_probs(tape, params, h0, traj.steps, init_size, state_masks)
    for lp, recorded in zip(lps, traj.log_probs):
        assert abs(lp.item() - recorded) < 1e-9, \
            "replayed log-probability diverged from the searched one"
    rewards = [r - baseline for r in traj.rewards]
    suffix = np.cumsum(rewards[::-1])[::-1]
    loss = None
    for lp, g in zip(lps, suffix):
        term = tape.scale(lp, -float(g))
        loss = term if loss is None else tape.add(loss, term)
    return loss


def cross_entropy_loss(tape: Tape, params: PolicyParams, h0: Tensor,
                       gold_steps, init_size: int,
                       state_masks: np.ndarray | None = None) -> Tensor:
    """Teacher-forced negative log-likelihood of the gold triplets."""
    if not gold_steps:
        raise ValueError("gold step sequence is empty (degenerate equation)")
    lps = replay_log_probs(tape, params, h0, gold_steps, init_size, state_masks)
    loss = None
    for lp in lps:
        term = tape.scale(lp, -1.0)
        loss = term if loss is None else tape.add(loss, term)
    return loss


# -- the training loop -------------------------------------------------------------

@dataclass
class TrainResult:
    params: PolicyParams
    discovered: dict[str, LabelledInstance]
    metrics: list[dict] = field(default_factory=list)
    adam: AdamState | None = None


def _model_config(cfg: TrainConfig, vocab: Vocab, capacity: int) -> ModelConfig:
    return ModelConfig(vocab_size=vocab.size, emb_dim=cfg.embedding_dim,
                       hidden_dim=cfg.hidden_dim, capacity=capacity)


def _serialize_discovered(discovered: dict[str, LabelledInstance]) -> list[dict]:
    return [{"id": pid, "equation": lab.equation, "source": lab.source,
             "steps": [[s.op, s.left, s.right, s.result] for s in lab.steps]}
            for pid, lab in sorted(discovered.items())]


def _restore_discovered(rows, by_id) -> dict[str, LabelledInstance]:
    out = {}
    for row in rows:
        inst = by_id[row["id"]]
        steps = [TripletStep(op, int(l), int(r), float(v))
                 for op, l, r, v in row["steps"]]
        out[row["id"]] = LabelledInstance(inst.problem, steps, row["equation"],
                                          row["source"])
    return out


def save_training_checkpoint(path, params: PolicyParams, vocab: Vocab,
                             adam: AdamState, next_epoch: int,
                             discovered: dict[str, LabelledInstance],
                             cfg: TrainConfig) -> None:
    arrays = {name: p.data for name, p in params.parameters().items()}
    for name, m in adam.m.items():
        arrays[f"adam.m.{name}"] = m
        arrays[f"adam.v.{name}"] = adam.v[name]
    meta = {
        "model_config": {f.name: getattr(params.config, f.name)
                         for f in fields(params.config)},
        "vocab": vocab.token_to_id,
        "extra": {
            "next_epoch": next_epoch,
            "adam_step": adam.step,
            "train_config": {f.name: getattr(cfg, f.name) for f in fields(cfg)},
            "discovered": _serialize_discovered(discovered),
        },
    }
    save_bundle(path, arrays, meta)


def load_training_checkpoint(path):
    """Returns (params, vocab, adam, next_epoch, discovered_rows, train_cfg)."""
    arrays, header = load_bundle(path)
    config = ModelConfig(**header["model_config"])
    params = PolicyParams.init(config, seed=0)
    named = params.parameters()
    for name, p in named.items():
        p.data = arrays[name]
    adam = AdamState(m={n: arrays[f"adam.m.{n}"] for n in named},
                     v={n: arrays[f"adam.v.{n}"] for n in named},
                     step=int(header["extra"]["adam_step"]))
    vocab = Vocab({tok: int(i) for tok, i in header["vocab"].items()})
    extra = header["extra"]
    cfg = TrainConfig(**extra["train_config"])
    return params, vocab, adam, int(extra["next_epoch"]), extra["discovered"], cfg


def train_warm(d2: list[TrainInstance], d1: list[TrainInstance],
               vocab: Vocab, cfg: TrainConfig,
               budget: SearchBudget | None = None, *,
               explore_gold: bool = True,
               checkpoint_dir=None,
               resume_from=None,
               answer_eps: float = 1e-4) -> TrainResult:
    """Joint training: policy-gradient loss on weak instances, teacher-forced
    cross-entropy on gold instances, summed per batch with one Adam step.

    Every instance (gold ones included, unless explore_gold is off) runs beam
    exploration each epoch; the best equation found per instance across all
    epochs is kept (first match, replaced only by a strictly shorter one).
    """
    if budget is None:
        budget = SearchBudget(beam_width=cfg.beam_width)
    pool = list(d2) + list(d1)
    if not pool:
        raise ValueError("no training instances")
    capacity = pool[0].opdict.capacity
    if any(inst.opdict.capacity != capacity for inst in pool):
        raise ValueError("instances disagree on operand capacity")
    by_id = {inst.enc.problem_id: inst for inst in pool}

    if resume_from is not None:
        params, ck_vocab, adam, start_epoch, disc_rows, _ = \
            load_training_checkpoint(resume_from)
        if ck_vocab.token_to_id != vocab.token_to_id:
            raise ValueError("checkpoint vocabulary does not match the corpus")
        discovered = _restore_discovered(disc_rows, by_id)
    else:
        params = PolicyParams.init(_model_config(cfg, vocab, capacity), cfg.seed)
        adam = AdamState.for_params(params.parameters())
        start_epoch = 0
        discovered = {}

    named = params.parameters()
    metrics: list[dict] = []
    reward_average = 0.0
    best_rate = -1.0

    def checkpoint(tag, next_epoch):
        if checkpoint_dir is None:
            return
        save_training_checkpoint(
            f"{checkpoint_dir}/{tag}.ckpt", params, vocab, adam, next_epoch,
            discovered, cfg)

    for epoch in range(start_epoch, cfg.epochs):
        t_start = time.time()
        lr = lr_at(epoch, cfg)
        order = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, epoch, 0x5EED])).permutation(len(pool))
        epoch_losses: list[float] = []
        epoch_rewards: list[float] = []

        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo:lo + cfg.batch_size]
            grad_acc = {name: np.zeros_like(p.data) for name, p in named.items()}
            for idx in batch:
                inst = pool[int(idx)]
                irng = np.random.default_rng(
                    instance_seed(cfg.seed, epoch, inst.enc.problem_id))
                n_steps = max(budget.t_max,
                              len(inst.gold_steps) if inst.gold_steps else 0)
                masks = draw_masks(irng, cfg, len(inst.enc.token_ids), n_steps)

                tape = Tape()
                _, h0 = encode(tape, params, inst.enc.token_ids, inst.enc.flags,
                               emb_masks=masks.emb)

                weak = inst.gold_steps is None
                if weak or explore_gold:
                    traj, _ = beam_explore(params, h0.data, inst.opdict,
                                           inst.enc.answer, budget, irng,
                                           state_masks=masks.state,
                                           answer_eps=answer_eps)
                    if traj.matched:
                        known = discovered.get(inst.enc.problem_id)
                        if known is None or len(traj.steps) < len(known.steps):
                            discovered[inst.enc.problem_id] = LabelledInstance(
                                inst.problem, list(traj.steps),
                                render_equation(traj.steps, inst.opdict),
                                "discovered")
                    epoch_rewards.append(float(sum(traj.rewards)))

                if weak:
                    baseline = reward_average if cfg.use_reward_baseline else 0.0
                    loss = reinforce_loss(tape, params, h0, traj,
                                          inst.opdict.size, masks.state, baseline)
                    if cfg.use_reward_baseline:
                        mean_r = float(np.mean(traj.rewards))
                        reward_average = 0.9 * reward_average + 0.1 * mean_r
                else:
                    loss = cross_entropy_loss(tape, params, h0, inst.gold_steps,
                                              inst.opdict.size, masks.state)
                    if cfg.ce_weight != 1.0:
                        loss = tape.scale(loss, cfg.ce_weight)

                value = loss.item()
                if not np.isfinite(value):
                    checkpoint("diverged-last-good", epoch)
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} "
                        f"(instance {inst.enc.problem_id})")
                epoch_losses.append(value)
                for p, g in tape.backward(loss, named.values()).items():
                    grad_acc[p.name] += g
            try:
                adam_update(named, grad_acc, adam, lr=lr,
                            weight_decay=cfg.weight_decay)
            except NonFiniteGradientError as exc:
                checkpoint("diverged-last-good", epoch)
                raise TrainingDiverged(str(exc)) from exc

        rate = len(discovered) / len(pool)
        metrics.append({
            "epoch": epoch,
            "lr": lr,
            "discovery_rate": rate,
            "mean_reward": float(np.mean(epoch_rewards)) if epoch_rewards else None,
            "loss": float(np.mean(epoch_losses)),
            "wall_time": time.time() - t_start,
        })
        if rate > best_rate:
            best_rate = rate
            checkpoint("best", epoch + 1)
        if (epoch + 1) % 10 == 0 or epoch + 1 == cfg.epochs:
            checkpoint(f"epoch-{epoch + 1:04d}", epoch + 1)
        logger.info("epoch %d: lr %.2e discovery %.3f loss %.4f",
                    epoch, lr, rate, metrics[-1]["loss"])

    return TrainResult(params, discovered, metrics, adam)


# -- step 2: dataset generation, distillation, evaluation -------------------------

def generate_dataset(params: PolicyParams, instances: list[TrainInstance],
                     budget: SearchBudget,
                     answer_eps: float = 1e-4) -> tuple[list[LabelledInstance], Metrics]:
    """Deterministic beam pass; keeps only instances whose best beam matched
    (equations may be longer than necessary - noisy by design)."""
    labelled = []
    rng = np.random.default_rng(0)  # greedy mode draws nothing
    for inst in instances:
        tape = Tape(record=False)
        _, h0 = encode(tape, params, inst.enc.token_ids, inst.enc.flags)
        traj, _ = beam_explore(params, h0.data, inst.opdict, inst.enc.answer,
                               budget, rng, greedy=True, answer_eps=answer_eps)
        if traj.matched:
            labelled.append(LabelledInstance(
                inst.problem, list(traj.steps),
                render_equation(traj.steps, inst.opdict), "discovered"))
    return labelled, Metrics(equation_generation_accuracy=len(labelled) / len(instances))


def validate_labelled(lab: LabelledInstance, opdict: OperandDict,
                      answer_eps: float = 1e-4) -> bool:
    from .equation import evaluate_triplets
    try:
        value = evaluate_triplets(lab.steps, opdict)
    except ValueError:
        return False
    return values_close(value, lab.problem.answer, answer_eps)


def train_supervised(labelled: list[LabelledInstance], cfg: TrainConfig,
                     pre_cfg: PreprocessConfig, vocab: Vocab | None = None,
                     capacity: int = DEFAULT_CAPACITY,
                     budget: SearchBudget | None = None,
                     checkpoint_dir=None) -> tuple[PolicyParams, Vocab]:
    """Fresh model trained by teacher forcing on labelled triplet programs."""
    from .corpus import build_vocab, preprocess

    if not labelled:
        raise ValueError("cannot distill from an empty labelled set")
    pairs = [(lab.problem, preprocess(lab.problem, pre_cfg)) for lab in labelled]
    if vocab is None:
        vocab = build_vocab((pp for _, pp in pairs))
    instances = []
    dropped = 0
    for lab, (problem, pp) in zip(labelled, pairs):
        inst = TrainInstance(encode_for_model(problem, pp, vocab),
                             init_operand_dict(pp, pre_cfg, capacity),
                             problem, gold_steps=list(lab.steps))
        if not validate_labelled(lab, inst.opdict, pre_cfg.answer_eps):
            dropped += 1
            continue
        instances.append(inst)
    if dropped:
        logger.warning("dropped %d labelled instance(s) that no longer "
                       "re-evaluate to their answer", dropped)
    if not instances:
        raise ValueError("no usable labelled instances after validation")
    result = train_warm([], instances, vocab, cfg, budget,
                        explore_gold=False, checkpoint_dir=checkpoint_dir,
                        answer_eps=pre_cfg.answer_eps)
    return result.params, vocab


def evaluate(params: PolicyParams, instances: list[TrainInstance],
             budget: SearchBudget, answer_eps: float = 1e-4) -> Metrics:
    """Greedy argmax decoding (no sampling, no dropout); an instance counts
    as solved when some step of its single decoded path hits the answer."""
    if not instances:
        raise ValueError("empty evaluation set")
    rng = np.random.default_rng(0)  # greedy mode draws nothing
    hits = 0
    for inst in instances:
        tape = Tape(record=False)
        _, h0 = encode(tape, params, inst.enc.token_ids, inst.enc.flags)
        traj = rollout(params, h0.data, inst.opdict, inst.enc.answer, budget,
                       rng, greedy=True, answer_eps=answer_eps)
        hits += traj.matched
    return Metrics(answer_accuracy=hits / len(instances))
