"""scikit-learn style wrapper: ``fit`` on dialogues, ``predict`` replies."""

from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import DEFAULT_MAX_HISTORY, DialogueSample, Vocab, build_context, build_sample
from .decoding import beam_search, greedy_decode
from .metrics import bleu
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, decoder_cross_entropy, train


def check_samples(X, y=None) -> List[DialogueSample]:
    """Coerce dicts / DialogueSamples into a validated list, optionally overriding replies with ``y``."""
    if isinstance(X, (DialogueSample, dict)):
        raise TypeError("expected a sequence of dialogues, got a single dialogue")
    samples = [x if isinstance(x, DialogueSample) else DialogueSample.from_dict(x) for x in X]
    if not samples:
        raise ValueError("expected at least one dialogue")
    if y is not None:
        y = list(y)
        if len(y) != len(samples):
            raise ValueError(f"X has {len(samples)} dialogues but y has {len(y)} replies")
        samples = [DialogueSample(s.persona, s.history, r) for s, r in zip(samples, y)]
    return samples


def check_contexts(X) -> List[Tuple[List[str], List[str]]]:
    """``(persona, history)`` pairs from dialogues; the gold reply is optional here."""
    if isinstance(X, (DialogueSample, dict)):
        raise TypeError("expected a sequence of dialogues, got a single dialogue")
    out = []
    for x in X:
        if isinstance(x, DialogueSample):
            out.append((list(x.persona), list(x.history)))
            continue
        try:
            persona, history = list(x["persona"]), list(x["history"])
        except KeyError as exc:
            raise ValueError(f"dialogue missing key {exc.args[0]!r}") from None
        if not persona or not history:
            raise ValueError("persona and history must be non-empty")
        out.append((persona, history))
    if not out:
        raise ValueError("expected at least one dialogue")
    return out


class FusionDialogueModel(BaseEstimator):
    """Multi-source dialogue generator with a pluggable attention-fusion method.

    Parameters mirror the model, training and decoding settings; see
    :class:`~fusionformer.model.ModelConfig` and
    :class:`~fusionformer.training.TrainConfig`.

    Attributes
    ----------
    model_ : FusionTransformer
    vocab_ : Vocab
    loss_log_ : list of dict
        One row per optimizer step.
    fusion_weights_ : ndarray of shape (n_layers, 3) or None
        Normalized (current, persona, history) weights for sw/dw.
    """

    def __init__(
        self,
        fusion_method: str = "sw",
        n_layers: int = 2,
        d_model: int = 64,
        n_heads: int = 4,
        max_positions: int = 128,
        dropout: float = 0.1,
        alpha: float = 0.5,
        beta: float = 0.5,
        gamma: float = 1.0,
        init_std: float = 0.02,
        epochs: int = 5,
        batch_size: int = 256,
        lr: float = 5e-4,
        warmup_proportion: float = 0.002,
        fusion_lr_multiplier: float = 5.0,
        grad_clip: float = 1.0,
        max_history: int = DEFAULT_MAX_HISTORY,
        beam_size: int = 3,
        length_penalty: float = 0.6,
        max_len: int = 20,
        random_state: int = 0,
    ):
        self.fusion_method = fusion_method
        self.n_layers = n_layers
        self.d_model = d_model
        self.n_heads = n_heads
        self.max_positions = max_positions
        self.dropout = dropout
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.init_std = init_std
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.warmup_proportion = warmup_proportion
        self.fusion_lr_multiplier = fusion_lr_multiplier
        self.grad_clip = grad_clip
        self.max_history = max_history
        self.beam_size = beam_size
        self.length_penalty = length_penalty
        self.max_len = max_len
        self.random_state = random_state

    def _model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size, n_layers=self.n_layers, d_model=self.d_model, n_heads=self.n_heads,
            max_positions=self.max_positions, dropout=self.dropout, fusion_method=self.fusion_method,
            alpha=self.alpha, beta=self.beta, gamma=self.gamma, init_std=self.init_std,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, seed=self.random_state, lr=self.lr,
            warmup_proportion=self.warmup_proportion, fusion_lr_multiplier=self.fusion_lr_multiplier,
            grad_clip=self.grad_clip,
        )

    def _items(self, samples: Sequence[DialogueSample]):
        return [build_sample(s, self.vocab_, self.max_history, self.max_positions) for s in samples]

    def fit(self, X, y=None, vocab: Optional[Vocab] = None):
        samples = check_samples(X, y)
        self.vocab_ = vocab if vocab is not None else Vocab.from_corpus(samples)
        items = self._items(samples)
        result = train(items, self._model_config(len(self.vocab_)), self._train_config())
        self.model_ = result.model
        self.loss_log_ = result.log
        self.fusion_weights_ = result.fusion_weights
        return self

    def _decode(self, persona, history) -> List[int]:
        p, h, _ = build_context(persona, history, self.vocab_, self.max_history, self.max_positions)
        if self.beam_size == 1:
            return greedy_decode(self.model_, p, h, self.max_len)
        return beam_search(self.model_, p, h, self.beam_size, self.max_len, self.length_penalty)

    def predict(self, X) -> List[str]:
        """Generated reply text for each dialogue (gold replies, if present, are ignored)."""
        check_is_fitted(self, "model_")
        return [self.vocab_.detokenize(self._decode(p, h)) for p, h in check_contexts(X)]

    def score(self, X, y=None) -> float:
        """Corpus BLEU (percentage) of generated replies against the gold replies."""
        samples = check_samples(X, y)
        return bleu([s.reply for s in samples], self.predict(samples))

    def cross_entropy(self, X, y=None) -> float:
        """Teacher-forced per-token decoder cross-entropy."""
        check_is_fitted(self, "model_")
        return decoder_cross_entropy(self.model_, self._items(check_samples(X, y)))

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_, self.vocab_.itos, extra={"estimator_params": self.get_params()})

    @classmethod
    def load(cls, path) -> "FusionDialogueModel":
        model, meta = load_checkpoint(path)
        est = cls(**meta.get("extra", {}).get("estimator_params", {}))
        if meta.get("vocab") is None:
            raise ValueError(f"{path} carries no vocabulary")
        est.vocab_ = Vocab.from_itos(meta["vocab"])
        est.model_ = model
        est.loss_log_ = []
        est.fusion_weights_ = model.fusion_weights()
        return est
