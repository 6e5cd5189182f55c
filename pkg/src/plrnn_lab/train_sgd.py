"""Supervised trainer: batched BPTT for the PLRNN and the vanilla ReLU RNN.

Latent dynamics are deterministic here (process noise off); the readout is
linear for the regression tasks and a softmax for classification.  Training
follows the reference recipe: Adam, global-norm gradient clipping, final-step
losses, and model selection by the lowest training loss across epochs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import (PlrnnParams, VanillaRnnWeights, load_blocks, make_rng, relu,
                   save_blocks)
from .regularizers import RegSpec, init_params, init_vanilla, penalty, penalty_grad

__all__ = [
    "NonFiniteLossError",
    "SgdConfig",
    "TrainResult",
    "TrainTestSplit",
    "bptt_grads",
    "forward_latents",
    "load_checkpoint",
    "p_correct",
    "predict",
    "save_checkpoint",
    "train",
]

LOSS_KINDS = ("mse_final_step", "cross_entropy_final_step")


class NonFiniteLossError(RuntimeError):
    """Loss or state became non-finite; carries the offending sample index."""

    def __init__(self, sample_index: int):
        super().__init__(f"non-finite loss at sample {sample_index}")
        self.sample_index = sample_index


@dataclass(frozen=True)
class SgdConfig:
    """Optimizer and model-construction settings for one supervised run."""

    lr: float = 0.001
    clip: float = 10.0
    batch_size: int = 500
    epochs: int = 100
    loss_kind: str = "mse_final_step"
    reg: RegSpec = field(default_factory=RegSpec)
    seed: int = 0
    model_kind: str = "plrnn"          # "plrnn" | "vanilla_rnn"
    M: int = 10
    init_scheme: str = "random"
    init_scale: float = 1.0
    correct_threshold: float = 0.04    # regression trial counts as correct below this
    task_weight: float = 1.0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0 or self.clip <= 0 or self.batch_size < 1:
            raise ValueError("need lr >= 0, clip > 0, batch_size >= 1")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.model_kind not in ("plrnn", "vanilla_rnn"):
            raise ValueError("model_kind must be 'plrnn' or 'vanilla_rnn'")


@dataclass
class TrainTestSplit:
    train: object  # TrialSet
    test: object


@dataclass
class TrainResult:
    best_params: object
    history: list          # per-epoch dicts: epoch, train_loss, test_loss, p_correct
    test_metrics: dict
    aborted: bool = False


# ---------------------------------------------------------------------------
# forward passes (batched over the first axis)
# ---------------------------------------------------------------------------

def forward_latents(model, inputs: np.ndarray) -> np.ndarray:
    """All latent states for a batch; inputs (R, T, K), returns (R, T, M).

    The pre-step state is zero, so input row t acts at step t.
    """
    R, T, _ = inputs.shape
    if isinstance(model, PlrnnParams):
        M = model.M
        z = np.zeros((R, M))
        out = np.empty((R, T, M))
        a, w, c, h = model.a_diag, model.w_offdiag, model.c_input, model.h_bias
        for t in range(T):
            z = z * a + relu(z) @ w.T + inputs[:, t, :] @ c.T + h
            out[:, t, :] = z
        return out
    M = model.M
    z = np.zeros((R, M))
    out = np.empty((R, T, M))
    w, c, h = model.w_full, model.c_input, model.h_bias
    for t in range(T):
        z = relu(z @ w.T + inputs[:, t, :] @ c.T + h)
        out[:, t, :] = z
    return out


def predict(model, inputs: np.ndarray) -> np.ndarray:
    """Final-step readout: (R, N) values (regression) or logits (classification)."""
    lat = forward_latents(model, inputs)
    return lat[:, -1, :] @ model.b_loading.T


def _loss_and_out_grad(y_hat, targets, loss_kind):
    R = y_hat.shape[0]
    if loss_kind == "mse_final_step":
        t = np.asarray(targets, dtype=np.float64).reshape(R, -1)
        diff = y_hat - t
        return float(np.sum(diff ** 2) / R), 2.0 * diff / R
    # cross entropy over softmax of the final-step logits
    shifted = y_hat - np.max(y_hat, axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / np.sum(e, axis=1, keepdims=True)
    idx = np.asarray(targets, dtype=int)
    ll = -np.log(np.clip(p[np.arange(R), idx], 1e-300, None))
    grad = p.copy()
    grad[np.arange(R), idx] -= 1.0
    return float(np.mean(ll)), grad / R


def bptt_grads(model, inputs: np.ndarray, targets, loss_kind: str):
    """Exact reverse-mode gradients of the mean batch loss.

    Returns (loss, grads) with grads keyed like the trainable fields.  The
    ReLU subgradient at exactly zero is zero.
    """
    lat = forward_latents(model, inputs)
    if not np.all(np.isfinite(lat)):
        bad = int(np.where(~np.all(np.isfinite(lat), axis=(1, 2)))[0][0])
        raise NonFiniteLossError(bad)
    R, T, M = lat.shape
    y_hat = lat[:, -1, :] @ model.b_loading.T
    loss, dy = _loss_and_out_grad(y_hat, targets, loss_kind)
    if not np.isfinite(loss):
        raise NonFiniteLossError(0)

    dB = dy.T @ lat[:, -1, :]
    delta = dy @ model.b_loading  # dL/dz_T, shape (R, M)
    zeros = np.zeros((R, M))
    if isinstance(model, PlrnnParams):
        a, w, c = model.a_diag, model.w_offdiag, model.c_input
        gA = np.zeros(M)
        gW = np.zeros((M, M))
        gC = np.zeros_like(c)
        gh = np.zeros(M)
        for t in range(T - 1, -1, -1):
            z_prev = lat[:, t - 1, :] if t > 0 else zeros
            phi_prev = relu(z_prev)
            gA += np.sum(delta * z_prev, axis=0)
            gW += delta.T @ phi_prev
            gC += delta.T @ inputs[:, t, :]
            gh += np.sum(delta, axis=0)
            if t > 0:
                delta = delta * a + (delta @ w) * (z_prev > 0.0)
        np.fill_diagonal(gW, 0.0)
        return loss, {"a_diag": gA, "w_offdiag": gW, "c_input": gC,
                      "h_bias": gh, "b_loading": dB}
    w, c = model.w_full, model.c_input
    gW = np.zeros((M, M))
    gC = np.zeros_like(c)
    gh = np.zeros(M)
    for t in range(T - 1, -1, -1):
        z_prev = lat[:, t - 1, :] if t > 0 else zeros
        dpre = delta * (lat[:, t, :] > 0.0)  # through relu at step t
        gW += dpre.T @ z_prev
        gC += dpre.T @ inputs[:, t, :]
        gh += np.sum(dpre, axis=0)
        if t > 0:
            delta = dpre @ w
    return loss, {"w_full": gW, "c_input": gC, "h_bias": gh, "b_loading": dB}


# ---------------------------------------------------------------------------
# Adam with global-norm clipping
# ---------------------------------------------------------------------------

def _trainable(model) -> dict:
    if isinstance(model, PlrnnParams):
        return {"a_diag": model.a_diag, "w_offdiag": model.w_offdiag,
                "c_input": model.c_input, "h_bias": model.h_bias,
                "b_loading": model.b_loading}
    return {"w_full": model.w_full, "c_input": model.c_input,
            "h_bias": model.h_bias, "b_loading": model.b_loading}


def _rebuild(model, values: dict):
    if isinstance(model, PlrnnParams):
        return model.replace(**values)
    return VanillaRnnWeights(**values)


def _clip_global(grads: dict, clip: float) -> dict:
    total = np.sqrt(sum(float(np.sum(g ** 2)) for g in grads.values()))
    if total > clip:
        scale = clip / total
        return {k: g * scale for k, g in grads.items()}
    return grads


class _Adam:
    def __init__(self, shapes: dict, lr, betas, eps):
        self.lr, self.eps = lr, eps
        self.b1, self.b2 = betas
        self.step_count = 0
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}

    def step(self, values: dict, grads: dict) -> dict:
        self.step_count += 1
        bc1 = 1.0 - self.b1 ** self.step_count
        bc2 = 1.0 - self.b2 ** self.step_count
        out = {}
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            out[k] = values[k] - self.lr * (self.m[k] / bc1) / (
                np.sqrt(self.v[k] / bc2) + self.eps)
        return out


def _build_model(config: SgdConfig, K: int, N: int):
    if config.model_kind == "plrnn":
        return init_params(config.init_scheme, config.M, K, N,
                           m_reg=config.reg.m_reg, seed=config.seed,
                           scale=config.init_scale)
    return init_vanilla(config.init_scheme, config.M, K, N,
                        seed=config.seed, scale=config.init_scale)


def _total_grads(config, model, task_grads):
    pen = penalty_grad(config.reg, model)
    out = {}
    for k, g in task_grads.items():
        g = config.task_weight * g
        if k in pen:
            g = g + pen[k]
        out[k] = g
    return out


def train(config: SgdConfig, data: TrainTestSplit, init_model=None,
          checkpoint_path=None, checkpoint_every: int | None = None,
          resume_from=None) -> TrainResult:
    """Run SGD training; deterministic given config (fixed shuffle order).

    Total loss is task loss (times ``task_weight``) plus the regularization
    penalty; the returned parameters are those of the epoch with the lowest
    training loss.  Training aborts with a partial trace when the loss
    exceeds 1e12 or turns non-finite.
    """
    inputs = np.asarray(data.train.inputs, dtype=np.float64)
    targets = data.train.targets
    R = inputs.shape[0]
    K = inputs.shape[2]
    N = (int(np.max(targets)) + 1 if config.loss_kind == "cross_entropy_final_step"
         else np.asarray(targets).reshape(R, -1).shape[1])

    model = init_model if init_model is not None else _build_model(config, K, N)
    shapes = {k: v.shape for k, v in _trainable(model).items()}
    adam = _Adam(shapes, config.lr, config.adam_betas, config.adam_eps)
    start_epoch = 0
    history: list = []
    best_loss = np.inf
    best_model = model

    if resume_from is not None:
        model, adam, start_epoch, history, best_loss, best_model = _restore(
            resume_from, config, model)

    aborted = False
    for epoch in range(start_epoch, config.epochs):
        order = np.random.Generator(np.random.Philox([config.seed, epoch])).permutation(R)
        epoch_losses = []
        for lo in range(0, R, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            try:
                task_loss, grads = bptt_grads(model, inputs[idx],
                                              _take(targets, idx), config.loss_kind)
            except NonFiniteLossError:
                aborted = True
                break
            total = config.task_weight * task_loss + penalty(config.reg, model)
            if not np.isfinite(total) or total > 1e12:
                aborted = True
                break
            epoch_losses.append(total)
            grads = _clip_global(_total_grads(config, model, grads), config.clip)
            values = {k: v.copy() for k, v in _trainable(model).items()}
            model = _rebuild(model, adam.step(values, grads))
        if aborted:
            break
        train_loss = float(np.mean(epoch_losses)) if epoch_losses else np.nan
        test_loss, test_pc = _evaluate(model, data.test, config)
        history.append({"epoch": epoch, "train_loss": train_loss,
                        "test_loss": test_loss, "p_correct": test_pc})
        if train_loss < best_loss:
            best_loss = train_loss
            best_model = model
        if checkpoint_path is not None and checkpoint_every and \
                (epoch + 1) % checkpoint_every == 0:
            save_checkpoint(checkpoint_path, model, adam, epoch + 1, history,
                            best_loss, best_model)

    test_loss, test_pc = _evaluate(best_model, data.test, config)
    return TrainResult(best_params=best_model, history=history,
                       test_metrics={"test_loss": test_loss, "p_correct": test_pc},
                       aborted=aborted)


def _take(targets, idx):
    return np.asarray(targets)[idx]


def _evaluate(model, test_set, config):
    y_hat = predict(model, np.asarray(test_set.inputs, dtype=np.float64))
    loss, _ = _loss_and_out_grad(y_hat, test_set.targets, config.loss_kind)
    pc = p_correct(model, test_set, config.loss_kind, config.correct_threshold)
    return loss, pc


def p_correct(model, test_set, loss_kind: str, threshold: float = 0.04) -> float:
    """Relative frequency of correctly predicted trials.

    Regression trials count as correct when every output component is within
    ``threshold`` of the target; classification uses the argmax.
    """
    inputs = np.asarray(test_set.inputs, dtype=np.float64)
    if inputs.shape[0] == 0:
        raise ValueError("p_correct requires a nonempty test set")
    y_hat = predict(model, inputs)
    if loss_kind == "cross_entropy_final_step":
        pred = np.argmax(y_hat, axis=1)
        return float(np.mean(pred == np.asarray(test_set.targets, dtype=int)))
    t = np.asarray(test_set.targets, dtype=np.float64).reshape(y_hat.shape[0], -1)
    ok = np.all(np.abs(y_hat - t) <= threshold, axis=1)
    return float(np.mean(ok))


# ---------------------------------------------------------------------------
# checkpoints (binary block + JSON sidecar scheme)
# ---------------------------------------------------------------------------

def _model_blocks(model, prefix):
    return {f"{prefix}{k}": v for k, v in _trainable(model).items()}


def save_checkpoint(path, model, adam: _Adam, epoch_next: int, history,
                    best_loss: float, best_model) -> None:
    blocks = {}
    blocks.update(_model_blocks(model, "param/"))
    blocks.update(_model_blocks(best_model, "best/"))
    blocks.update({f"adam_m/{k}": v for k, v in adam.m.items()})
    blocks.update({f"adam_v/{k}": v for k, v in adam.v.items()})
    meta = {
        "kind": "plrnn" if isinstance(model, PlrnnParams) else "vanilla_rnn",
        "epoch_next": epoch_next,
        "adam_step": adam.step_count,
        "best_loss": best_loss,
        "history": history,
    }
    save_blocks(path, blocks, meta)


def load_checkpoint(path):
    blocks, meta = load_blocks(path)
    return blocks, meta


def _restore(path, config: SgdConfig, template):
    blocks, meta = load_checkpoint(path)
    names = list(_trainable(template).keys())
    model = _rebuild(template, {k: blocks[f"param/{k}"] for k in names})
    best_model = _rebuild(template, {k: blocks[f"best/{k}"] for k in names})
    adam = _Adam({k: v.shape for k, v in _trainable(model).items()},
                 config.lr, config.adam_betas, config.adam_eps)
    adam.m = {k: blocks[f"adam_m/{k}"] for k in names}
    adam.v = {k: blocks[f"adam_v/{k}"] for k in names}
    adam.step_count = int(meta["adam_step"])
    return (model, adam, int(meta["epoch_next"]), list(meta["history"]),
            float(meta["best_loss"]), best_model)
