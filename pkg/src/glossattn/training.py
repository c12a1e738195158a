"""Optimiser, plateau scheduler, training loop and evaluation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics
from . import numerics as nx
from .checkpoint import save_checkpoint
from .config import coerce_dataclass, read_key_values
from .data import PAD, Corpus, Sample, SimilarityMatrix, Vocab, batch_and_mask, compute_similarity_oracle, read_corpus, read_similarity
from .model import ModelConfig, Translator
from .numerics import Tensor
from .objectives import kt_loss_batch, label_smoothed_ce, total_loss

log = logging.getLogger(__name__)


class ValidationError(ValueError):
    pass


@dataclass
class TrainConfig:
    data_dir: str = "data"
    out_dir: str = "runs/default"
    epochs: int = 50
    batch_size: int = 32
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.998
    adam_eps: float = 1e-8
    weight_decay: float = 1e-3
    patience: int = 9
    decrease_factor: float = 0.5
    min_lr: float = 1e-7
    label_smoothing: float = 0.4
    kt_weight: float = 1.0
    seed: int = 42
    max_output_len: int = 30
    beam: int = 1
    model: ModelConfig = field(default_factory=lambda: ModelConfig(vocab_size=0, feature_dim=0))

    def lines(self) -> list[str]:
        flat = {k: v for k, v in asdict(self).items() if k != "model"}
        flat.update(asdict(self.model))
        return [f"{k}={v}" for k, v in flat.items()]


def load_train_config(path) -> TrainConfig:
    """Flat key=value file mixing training and model keys."""
    values = read_key_values(path)
    model_keys = {f.name for f in fields(ModelConfig)}
    model_vals = {k: v for k, v in values.items() if k in model_keys}
    train_vals = {k: v for k, v in values.items() if k not in model_keys}
    model_vals.setdefault("vocab_size", "0")
    model_vals.setdefault("feature_dim", "0")
    cfg = coerce_dataclass(TrainConfig, train_vals)
    cfg.model = coerce_dataclass(ModelConfig, model_vals)
    return cfg


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.998), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class PlateauScheduler:
    """Multiply the lr by ``factor`` once the monitored (maximised) metric has
    failed to improve for more than ``patience`` consecutive steps."""

    def __init__(self, optimizer: Adam, patience: int = 9, factor: float = 0.5, threshold: float = 1e-4):
        self.optimizer = optimizer
        self.patience = patience
        self.factor = factor
        self.threshold = threshold
        self.best = -np.inf
        self.bad_steps = 0

    def step(self, metric: float) -> float:
        if metric > self.best * (1.0 + self.threshold) if self.best > 0 else metric > self.best:
            self.best = metric
            self.bad_steps = 0
        else:
            self.bad_steps += 1
        if self.bad_steps > self.patience:
            self.optimizer.lr *= self.factor
            self.bad_steps = 0
        return self.optimizer.lr


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    metrics: dict[str, float]
    hypotheses: list[str]
    references: list[str]
    layer_cad: dict[int, float]


def encode_split(model: Translator, samples: Sequence[Sample], vocab: Vocab, batch_size: int = 32):
    """Eval-mode encoding; yields ``(batch, EncoderOutput)`` pairs."""
    model.eval()
    with nx.no_grad():
        for batch in batch_and_mask(list(samples), batch_size, vocab):
            yield batch, model.encode(batch.features, batch.feature_mask)


def evaluate(
    model: Translator,
    samples: Sequence[Sample],
    vocab: Vocab,
    similarity: SimilarityMatrix | None = None,
    beam: int = 1,
    max_len: int = 30,
    batch_size: int = 32,
    cad_delta: float = 0.1,
) -> EvalResult:
    """BLEU-1..4, ROUGE-L, ASD against ``similarity`` and mean encoder CAD."""
    hyps: list[str] = []
    embeddings = []
    maps = []
    for batch, enc in encode_split(model, samples, vocab, batch_size):
        with nx.no_grad():
            ids = model.greedy(enc, max_len) if beam <= 1 else model.beam(enc, beam, max_len)
        hyps.extend(vocab.decode(seq) for seq in ids)
        embeddings.append(enc.embedding.data)
        maps.extend(enc.maps)
    refs = [s.sentence for s in samples]
    b = metrics.bleu(hyps, refs)
    out = {f"bleu{n + 1}": b[n] for n in range(4)}
    out["rouge_l"] = metrics.corpus_rouge_l(hyps, refs)
    ids = [s.id for s in samples]
    if len(samples) >= 2:
        if similarity is None:
            similarity = compute_similarity_oracle(refs, ids)
        s_hat = metrics.embedding_similarity(np.concatenate(embeddings), ids)
        out["asd"] = metrics.asd(s_hat, similarity.submatrix(ids))
    else:
        out["asd"] = float("nan")
    layer_cad = metrics.mean_cad(maps, cad_delta)
    out["cad"] = float(np.mean(list(layer_cad.values()))) if layer_cad else float("nan")
    return EvalResult(out, hyps, refs, layer_cad)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class RunArtifacts:
    out_dir: Path
    checkpoint: Path
    metric_log: Path
    config: Path
    attention_dir: Path
    history: list[dict[str, float]] = field(default_factory=list)
    best_dev_bleu4: float = -np.inf


def resolve_model_config(cfg: ModelConfig, corpus: Corpus) -> ModelConfig:
    vocab_size = len(corpus.vocab)
    dims = {s.features.shape[1] for samples in corpus.splits.values() for s in samples}
    if len(dims) > 1:
        raise ValidationError(f"corpus mixes feature dims {sorted(dims)}")
    feature_dim = dims.pop() if dims else cfg.feature_dim
    if cfg.vocab_size not in (0, vocab_size):
        raise ValidationError(f"config vocab_size={cfg.vocab_size} but corpus vocab has {vocab_size} entries")
    if cfg.feature_dim not in (0, feature_dim):
        raise ValidationError(f"config feature_dim={cfg.feature_dim} but corpus features have dim {feature_dim}")
    resolved = ModelConfig(**{**asdict(cfg), "vocab_size": vocab_size, "feature_dim": feature_dim})
    resolved.validate()
    return resolved


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def train(config: TrainConfig, corpus: Corpus | None = None) -> RunArtifacts:
    """Train with label-smoothed CE plus weighted knowledge transfer.

    Keeps the checkpoint with the best dev BLEU-4, halves the lr on dev
    BLEU-4 plateaus and stops once the lr falls below ``min_lr``.
    """
    data_dir = Path(config.data_dir)
    if corpus is None:
        corpus = read_corpus(data_dir)
    for split in ("train", "dev"):
        if split not in corpus.splits or not corpus.splits[split]:
            raise ValidationError(f"corpus has no {split!r} split")
    model_cfg = resolve_model_config(config.model, corpus)
    config.model = model_cfg

    train_set, dev_set = corpus["train"], corpus["dev"]
    sim_path = data_dir / "similarity_train.csv"
    if sim_path.exists():
        s_train = read_similarity(sim_path)
    else:
        s_train = compute_similarity_oracle([s.sentence for s in train_set], [s.id for s in train_set])
    dev_path = data_dir / "similarity_dev.csv"
    s_dev = read_similarity(dev_path) if dev_path.exists() else None

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    art = RunArtifacts(out, out / "best.ckpt", out / "metrics.log", out / "config.txt", out / "attention")
    art.config.write_text("\n".join(config.lines()) + "\n", encoding="utf-8")

    model = Translator(model_cfg, seed=config.seed)
    opt = Adam(model.parameters(), config.lr, (config.beta1, config.beta2), config.adam_eps, config.weight_decay)
    sched = PlateauScheduler(opt, config.patience, config.decrease_factor)
    rng = np.random.default_rng([config.seed, 2])

    with open(art.metric_log, "w", encoding="utf-8") as logf:
        for epoch in range(1, config.epochs + 1):
            model.train()
            order = rng.permutation(len(train_set))
            sums = np.zeros(3)
            n_batches = 0
            for batch in batch_and_mask([train_set[i] for i in order], config.batch_size, corpus.vocab):
                enc = model.encode(batch.features, batch.feature_mask)
                logits = model.decode_logits(enc, batch.tokens_in, batch.token_mask)
                ce = label_smoothed_ce(logits, batch.tokens_out, config.label_smoothing, pad_id=PAD)
                if config.kt_weight > 0:
                    kt = kt_loss_batch(enc.embedding, s_train.submatrix(batch.ids))
                else:
                    kt = Tensor(0.0)
                loss = total_loss(ce, kt, config.kt_weight)
                opt.zero_grad()
                loss.backward()
                opt.step()
                sums += (ce.item(), kt.item(), loss.item())
                n_batches += 1
            lr_used = opt.lr
            result = evaluate(model, dev_set, corpus.vocab, s_dev, 1, config.max_output_len, config.batch_size)
            dev_b4 = result.metrics["bleu4"]
            improved = dev_b4 > art.best_dev_bleu4
            if improved:
                art.best_dev_bleu4 = dev_b4
                save_checkpoint(art.checkpoint, model, corpus.vocab, {"epoch": epoch, "dev_bleu4": dev_b4})
            sched.step(dev_b4)
            record = {
                "epoch": epoch,
                "lr": lr_used,
                "translation_loss": sums[0] / n_batches,
                "kt_loss": sums[1] / n_batches,
                "total_loss": sums[2] / n_batches,
                **{f"dev_{k}": v for k, v in result.metrics.items()},
                "best": int(improved),
            }
            art.history.append(record)
            logf.write(" ".join(f"{k}={_fmt(v)}" for k, v in record.items()) + "\n")
            logf.flush()
            log.info("epoch %d loss %.4f dev bleu4 %.4f", epoch, record["total_loss"], dev_b4)
            if opt.lr < config.min_lr:
                break
    return art
