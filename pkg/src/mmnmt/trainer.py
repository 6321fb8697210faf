"""Teacher-forced NLL training with L2, Adam/Adadelta and BLEU early stopping."""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import EOS, Batch, ParallelExample, make_batches
from .decoder import teacher_forced_logprob
from .encoder import encode
from .model import Dims, ModelParams, param_table, save_checkpoint, write_tensor_file
from .tensor import GradTape, NumericError, Tensor

log = logging.getLogger(__name__)

PRESETS = {
    # "monomodal" is the text-only translation recipe; everything else uses "multimodal"
    "multimodal": {"optimizer": "adam", "init": "xavier", "l2_lambda": 1e-4},
    "monomodal": {"optimizer": "adadelta", "init": "gaussian", "l2_lambda": 5e-4},
}


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    batch_size: int = 32
    l2_lambda: float = 1e-4
    init: str = "xavier"
    init_std: float = 0.01
    eval_every: int = 1000
    patience: int = 20
    beam: int = 12
    lr: float = 4e-4
    clip: float = 5.0          # global grad-norm clip; <= 0 disables
    seed: int = 1234
    max_updates: int = 0       # 0 = no horizon
    max_len: int = 80
    sort_by_src_len: bool = True
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    adadelta_rho: float = 0.95
    adadelta_eps: float = 1e-6

    def __post_init__(self):
        if self.optimizer not in ("adam", "adadelta"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.init not in ("xavier", "gaussian"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.batch_size < 1 or self.eval_every < 1 or self.patience < 1 or self.beam < 1:
            raise ValueError("batch_size, eval_every, patience and beam must be >= 1")
        if self.l2_lambda < 0 or self.lr <= 0:
            raise ValueError("l2_lambda must be >= 0 and lr > 0")

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        return cls(**{**PRESETS[name], **overrides})

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def xavier_bound(shape) -> float:
    fan_out, fan_in = (1, shape[0]) if len(shape) == 1 else shape
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_params(config: TrainConfig, dims: Dims, multimodal: bool = True) -> ModelParams:
    """Xavier-uniform or N(0, std) weights, zero biases, in table order from ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    arrays = OrderedDict()
    for name, shape, kind in param_table(dims, multimodal):
        if kind == "bias":
            arrays[name] = np.zeros(shape)
        elif config.init == "xavier":
            b = xavier_bound(shape)
            arrays[name] = rng.uniform(-b, b, size=shape)
        else:
            arrays[name] = rng.normal(0.0, config.init_std, size=shape)
    return ModelParams.from_arrays(dims, arrays, multimodal)


def l2_term(params: ModelParams) -> Tensor:
    terms = [T.sumsq(t) for _, t in params.weights()]
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


def data_nll(batch: Batch, params: ModelParams, multimodal: bool) -> Tensor:
    """Mean negative log-likelihood per real target token (BOS excluded)."""
    enc = encode(params, batch.src, batch.src_mask, batch.image, multimodal)
    logp = teacher_forced_logprob(enc, batch.tgt, batch.tgt_mask, params, multimodal)
    n_tokens = float(batch.tgt_mask[:, 1:].sum())
    return T.mul(logp, -1.0 / n_tokens)


def nll_loss(batch: Batch, params: ModelParams, multimodal: bool, l2_lambda: float = 0.0) -> Tensor:
    loss = data_nll(batch, params, multimodal)
    if l2_lambda > 0:
        loss = T.add(loss, T.mul(l2_term(params), l2_lambda))
    return loss


def loss_and_grads(batch: Batch, params: ModelParams, multimodal: bool, l2_lambda: float):
    leaves = list(params.tensors.values())
    with GradTape() as tape:
        nll = data_nll(batch, params, multimodal)
        loss = T.add(nll, T.mul(l2_term(params), l2_lambda)) if l2_lambda > 0 else nll
    grads = T.backward(tape, loss, wrt=leaves)
    return loss.item(), nll.item(), OrderedDict((n, grads[t]) for n, t in params.items())


def clip_grads(grads: dict, max_norm: float) -> tuple[dict, float]:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        grads = OrderedDict((n, g * scale) for n, g in grads.items())
    return grads, norm


def _check_grads(grads: dict) -> None:
    for n, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {n}")


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> tuple[dict, AdamState]:
    """Bias-corrected Adam on name->array dicts; returns fresh params and state."""
    _check_grads(grads)
    t = state.t + 1
    new_p, new_m, new_v = OrderedDict(), {}, {}
    for n, p in params.items():
        g = grads[n]
        m = beta1 * state.m.get(n, 0.0) + (1 - beta1) * g
        v = beta2 * state.v.get(n, 0.0) + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_p[n] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[n], new_v[n] = m, v
    return new_p, AdamState(t, new_m, new_v)


@dataclass
class AdadeltaState:
    t: int = 0
    acc_grad: dict = field(default_factory=dict)
    acc_delta: dict = field(default_factory=dict)


def adadelta_step(params: dict, grads: dict, state: AdadeltaState, rho: float = 0.95,
                  eps: float = 1e-6) -> tuple[dict, AdadeltaState]:
    _check_grads(grads)
    new_p, new_g, new_d = OrderedDict(), {}, {}
    for n, p in params.items():
        g = grads[n]
        eg = rho * state.acc_grad.get(n, 0.0) + (1 - rho) * g * g
        ed = state.acc_delta.get(n, 0.0)
        delta = -np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
        new_d[n] = rho * ed + (1 - rho) * delta * delta
        new_g[n] = eg
        new_p[n] = p + delta
    return new_p, AdadeltaState(state.t + 1, new_g, new_d)


def optimizer_arrays(opt_state) -> tuple[OrderedDict, dict]:
    if isinstance(opt_state, AdamState):
        parts = (("m", opt_state.m), ("v", opt_state.v))
    else:
        parts = (("acc_grad", opt_state.acc_grad), ("acc_delta", opt_state.acc_delta))
    arrays = OrderedDict()
    for prefix, d in parts:
        for n in sorted(d):
            arrays[f"{prefix}.{n}"] = np.asarray(d[n], dtype=np.float64)
    return arrays, {"optimizer": type(opt_state).__name__, "t": opt_state.t}


@dataclass
class TrainState:
    update: int = 0
    epoch: int = 0
    best_bleu: float = -math.inf
    evals_since_improvement: int = 0
    best_update: int = 0
    opt_state: object = None


@dataclass
class TrainResult:
    params: ModelParams           # parameters with the best validation BLEU
    best_bleu: float
    state: TrainState
    log_lines: list
    history: list                 # (update, loss, val_bleu) per evaluation
    stopped_early: bool
    final_params: Optional[ModelParams] = None


class TrainingAborted(RuntimeError):
    def __init__(self, msg, state: TrainState, params: ModelParams):
        super().__init__(msg)
        self.state = state
        self.params = params


def make_bleu_evaluator(valid_set: Sequence[ParallelExample], multimodal: bool, beam: int,
                        max_len: int = 80) -> Callable[[ModelParams], float]:
    """Corpus BLEU-4 of beam (or greedy, for beam 1) decodes against the references."""
    from .generator import decode_example
    from .metrics import corpus_bleu

    refs = [[[t for t in ex.tgt_ids[1:-1]]] for ex in valid_set]

    def evaluate(params: ModelParams) -> float:
        hyps = [decode_example(params, ex.src_ids, ex.image_features, multimodal, beam, max_len).body
                for ex in valid_set]
        return corpus_bleu(hyps, refs).bleu[4]

    return evaluate


def _save(path, params, config, state, opt_state):
    save_checkpoint(path, params, {"config": asdict(config), "update": state.update,
                                  "best_bleu": _finite_or_none(state.best_bleu)})
    if opt_state is not None:
        arrays, meta = optimizer_arrays(opt_state)
        write_tensor_file(str(path) + ".optim", arrays, meta)


def _finite_or_none(x):
    return x if math.isfinite(x) else None


def format_log_line(update: int, loss: float, bleu: float, patience: int) -> str:
    return f"update={update} loss={loss:.6f} val_bleu={bleu:.4f} patience={patience}"


def train_loop(config: TrainConfig, train_set: Sequence[ParallelExample],
               valid_set: Sequence[ParallelExample], params: ModelParams, multimodal: bool,
               evaluator: Optional[Callable[[ModelParams], float]] = None,
               log_path=None, checkpoint_path=None,
               stop_condition: Optional[Callable[[TrainState, ModelParams, float], bool]] = None,
               ) -> TrainResult:
    """Train until validation BLEU fails to improve for ``config.patience`` evaluations.

    A baseline evaluation at update 0 sets the bar; afterwards BLEU is
    measured every ``eval_every`` updates and only a strict gain at four
    decimals resets the patience counter. ``stop_condition`` is consulted
    after every periodic evaluation and ends training when it returns True.
    """
    if not train_set or not valid_set:
        raise ValueError("train and validation sets must be non-empty")
    if evaluator is None:
        evaluator = make_bleu_evaluator(valid_set, multimodal, config.beam, config.max_len)
    log_fh = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    if config.optimizer == "adam":
        opt_state = AdamState()
    else:
        opt_state = AdadeltaState()
    state = TrainState(opt_state=opt_state)
    lines, history = [], []
    best_params = params
    period_losses: list = []

    def emit(loss):
        line = format_log_line(state.update, loss, bleu, state.evals_since_improvement)
        lines.append(line)
        history.append((state.update, loss, bleu))
        log.info(line)
        if log_fh is not None:
            log_fh.write(line + "\n")
            log_fh.flush()

    def evaluate(current):
        try:
            return float(evaluator(current))
        except Exception as exc:
            if checkpoint_path is not None:
                _save(str(checkpoint_path) + ".last", current, config, state, state.opt_state)
            raise TrainingAborted(f"validation failed at update {state.update}: {exc}",
                                  state, current) from exc

    def finish(current, stopped_early):
        if checkpoint_path is not None:
            _save(str(checkpoint_path) + ".last", current, config, state, state.opt_state)
        return TrainResult(best_params, state.best_bleu, state, lines, history, stopped_early, current)

    try:
        first = make_batches(train_set, config.batch_size, config.sort_by_src_len, config.seed)[0]
        init_loss = nll_loss(first, params, multimodal, config.l2_lambda).item()
        bleu = evaluate(params)
        state.best_bleu = bleu
        if checkpoint_path is not None:
            _save(checkpoint_path, params, config, state, None)
        emit(init_loss)

        while True:
            batches = make_batches(train_set, config.batch_size, config.sort_by_src_len,
                                   config.seed + state.epoch + 1)
            for batch in batches:
                loss, _, grads = loss_and_grads(batch, params, multimodal, config.l2_lambda)
                grads, _ = clip_grads(grads, config.clip)
                if config.optimizer == "adam":
                    new, state.opt_state = adam_step(params.arrays(), grads, state.opt_state, config.lr,
                                                     config.adam_beta1, config.adam_beta2, config.adam_eps)
                else:
                    new, state.opt_state = adadelta_step(params.arrays(), grads, state.opt_state,
                                                         config.adadelta_rho, config.adadelta_eps)
                params = params.replace(new)
                state.update += 1
                period_losses.append(loss)

                if state.update % config.eval_every == 0:
                    bleu = evaluate(params)
                    if round(bleu, 4) > round(state.best_bleu, 4):
                        state.best_bleu = bleu
                        state.best_update = state.update
                        state.evals_since_improvement = 0
                        best_params = params
                        if checkpoint_path is not None:
                            _save(checkpoint_path, params, config, state, state.opt_state)
                    else:
                        state.evals_since_improvement += 1
                    emit(float(np.mean(period_losses)))
                    period_losses = []
                    if state.evals_since_improvement >= config.patience:
                        return finish(params, True)
                    if stop_condition is not None and stop_condition(state, params, bleu):
                        return finish(params, False)
                if config.max_updates and state.update >= config.max_updates:
                    return finish(params, False)
            state.epoch += 1
    finally:
        if log_fh is not None:
            log_fh.close()


def greedy_reproduction_rate(params: ModelParams, examples: Sequence[ParallelExample],
                             multimodal: bool, max_len: int = 80) -> float:
    """Fraction of examples whose greedy decode equals the target exactly."""
    from .generator import decode_example

    hits = 0
    for ex in examples:
        hyp = decode_example(params, ex.src_ids, ex.image_features, multimodal, 1, max_len)
        hits += hyp.tokens[1:] == list(ex.tgt_ids[1:]) and hyp.tokens[-1] == EOS
    return hits / len(examples)
