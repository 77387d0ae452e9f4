"""Group distillation: class grouping, decomposed KL terms, cross-model losses.

Two entry levels are provided. The scalar functions (:func:`decompose`,
:func:`tc_kd`, :func:`rc_kd`, :func:`fc_kd`, :func:`gd_loss`, :func:`kl_div`)
work on one probability vector at a time and are meant for inspection and
testing. The ``*_graph`` functions evaluate the same quantities batched on
autodiff tensors and are what local training differentiates.

Conventions shared by both levels:

* every ``log`` clamps its argument to ``>= 1e-12``;
* a term ``a * log(a / b)`` with teacher mass ``a == 0`` is 0;
* each distribution is normalized by its *own* non-true mass;
* if either side's non-true mass is ``<= 1e-12`` the normalized-space terms
  (everything in RC-KD and FC-KD) are 0 for that sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .nn import autograd as ag
from .nn.autograd import LOG_EPS, Tensor
from .nn.functional import cross_entropy_graph, one_hot, softmax
from .nn.model import BoundModel, ConfigError, ModelParams


@dataclass(frozen=True)
class ClassGroups:
    rich: frozenset[int]
    few: frozenset[int]
    gamma: float
    num_classes: int = field(default=-1)

    def __post_init__(self):
        object.__setattr__(self, "rich", frozenset(int(c) for c in self.rich))
        object.__setattr__(self, "few", frozenset(int(c) for c in self.few))
        if self.rich & self.few:
            raise ValueError(f"classes in both groups: {sorted(self.rich & self.few)}")
        n = self.num_classes if self.num_classes >= 0 else len(self.rich | self.few)
        object.__setattr__(self, "num_classes", n)
        if self.rich | self.few != set(range(n)):
            raise ValueError(f"groups must cover classes 0..{n - 1} exactly")

    def few_mask(self) -> np.ndarray:
        mask = np.zeros(self.num_classes, dtype=bool)
        mask[list(self.few)] = True
        return mask

    def swapped(self) -> ClassGroups:
        return ClassGroups(self.few, self.rich, self.gamma, self.num_classes)


def classify_groups(class_counts, gamma: float) -> ClassGroups:
    """Rich classes are those whose local share strictly exceeds ``gamma``."""
    counts = np.asarray(class_counts, dtype=np.float64)
    if np.any(counts < 0):
        raise ValueError("class counts must be non-negative")
    total = counts.sum()
    if total <= 0:
        raise ValueError("cannot group classes of an empty dataset")
    rich = np.flatnonzero(counts / total > gamma)
    few = np.setdiff1d(np.arange(counts.size), rich)
    return ClassGroups(frozenset(rich.tolist()), frozenset(few.tolist()), float(gamma), counts.size)


@dataclass(frozen=True)
class GDConfig:
    alpha_t: float = 0.0
    alpha_r: float = 0.5
    alpha_f: float = 1.0
    temperature: float = 1.0

    def __post_init__(self):
        for name in ("alpha_t", "alpha_r", "alpha_f"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")


@dataclass(frozen=True)
class CompositeLossConfig:
    beta_L: float = 1.0
    beta_E: float = 0.3
    beta_FC: float = 0.3
    gd: GDConfig = field(default_factory=GDConfig)

    def __post_init__(self):
        for name in ("beta_L", "beta_E", "beta_FC"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")


# -- scalar level -----------------------------------------------------------


@dataclass(frozen=True)
class DecomposedDistribution:
    """One probability vector rewritten around its true class.

    ``q_tilde`` has one entry per class; the true-class entry is 0 and the
    rest sum to 1 unless the distribution is degenerate.
    """

    true_class: int
    q_t: float
    p_not_t: float
    q_tilde: np.ndarray
    p_tilde_f: float
    p_tilde_r: float

    @property
    def degenerate(self) -> bool:
        return self.p_not_t <= LOG_EPS


def decompose(probs, true_class: int, groups: ClassGroups) -> DecomposedDistribution:
    q = np.asarray(probs, dtype=np.float64)
    t = int(true_class)
    others = np.ones(q.size, dtype=bool)
    others[t] = False
    p_not_t = float(q[others].sum())
    if p_not_t <= LOG_EPS:
        return DecomposedDistribution(t, float(q[t]), p_not_t, np.zeros(q.size), 0.0, 0.0)
    q_tilde = np.where(others, q / p_not_t, 0.0)
    few = groups.few_mask() & others
    rich = ~groups.few_mask() & others
    return DecomposedDistribution(
        t, float(q[t]), p_not_t, q_tilde, float(q[few].sum() / p_not_t), float(q[rich].sum() / p_not_t)
    )


def _kl_term(a: float, b: float) -> float:
    if a <= 0:
        return 0.0
    return a * (np.log(max(a, LOG_EPS)) - np.log(max(b, LOG_EPS)))


def kl_div(q_g, q_l) -> float:
    return float(sum(_kl_term(a, b) for a, b in zip(np.ravel(q_g), np.ravel(q_l))))


def tc_kd(dg: DecomposedDistribution, dl: DecomposedDistribution) -> float:
    return _kl_term(dg.q_t, dl.q_t) + _kl_term(dg.p_not_t, dl.p_not_t)


def _group_kd(dg, dl, members: Iterable[int], lumped_g: float, lumped_l: float) -> float:
    if dg.degenerate or dl.degenerate:
        return 0.0
    inner = sum(_kl_term(dg.q_tilde[i], dl.q_tilde[i]) for i in members if i != dg.true_class)
    return inner + _kl_term(lumped_g, lumped_l)


def rc_kd(dg: DecomposedDistribution, dl: DecomposedDistribution, groups: ClassGroups) -> float:
    """Within-rich KL in normalized non-true space plus the lumped few-class term."""
    return _group_kd(dg, dl, sorted(groups.rich), dg.p_tilde_f, dl.p_tilde_f)


def fc_kd(dg: DecomposedDistribution, dl: DecomposedDistribution, groups: ClassGroups) -> float:
    """Within-few KL in normalized non-true space plus the lumped rich-class term."""
    return _group_kd(dg, dl, sorted(groups.few), dg.p_tilde_r, dl.p_tilde_r)


def gd_loss(q_g, q_l, true_class: int, groups: ClassGroups, cfg: GDConfig) -> float:
    dg = decompose(q_g, true_class, groups)
    dl = decompose(q_l, true_class, groups)
    total = 0.0
    if cfg.alpha_t:
        total += cfg.alpha_t * tc_kd(dg, dl)
    if cfg.alpha_r:
        total += cfg.alpha_r * rc_kd(dg, dl, groups)
    if cfg.alpha_f:
        total += cfg.alpha_f * fc_kd(dg, dl, groups)
    return total


def gd_loss_from_logits(z_g, z_l, true_class: int, groups: ClassGroups, cfg: GDConfig) -> float:
    return gd_loss(softmax(z_g, cfg.temperature), softmax(z_l, cfg.temperature), true_class, groups, cfg)


# -- batched graph level ----------------------------------------------------


def _kl_terms_graph(a: np.ndarray, b: Tensor) -> Tensor:
    """Elementwise ``a * log(a / b)`` with constant teacher ``a``."""
    pos = a > 0
    coeff = np.where(pos, a, 0.0)
    const = np.where(pos, coeff * np.log(np.maximum(a, LOG_EPS)), 0.0)
    return ag.sub(const, ag.mul(ag.log(b), coeff))


def gd_terms_graph(p_g: np.ndarray, p_l: Tensor, labels, groups: ClassGroups) -> dict[str, Tensor]:
    """Per-sample TC-KD, RC-KD and FC-KD between constant teacher and student probabilities."""
    p_g = np.asarray(p_g)
    n, c = p_g.shape
    true = one_hot(labels, c, p_g.dtype)
    others = 1.0 - true
    few_cols = groups.few_mask().astype(p_g.dtype)
    few = others * few_cols
    rich = others * (1.0 - few_cols)

    def mass(mask):
        return ag.sum(ag.mul(p_l, mask), axis=-1)

    qt_g, pn_g = (p_g * true).sum(-1), (p_g * others).sum(-1)
    qt_l, pn_l = mass(true), mass(others)
    tc = ag.add(_kl_terms_graph(qt_g, qt_l), _kl_terms_graph(pn_g, pn_l))

    valid = (pn_g > LOG_EPS) & (pn_l.data > LOG_EPS)
    vcol = valid[:, None]
    pn_g_safe = np.where(valid, pn_g, 1.0)
    # Keeps invalid rows away from 0/0 in the graph; they are masked out below.
    pn_l_safe = ag.add(pn_l, np.where(valid, 0.0, 1.0).astype(p_g.dtype))

    qtil_g = np.where(vcol, p_g / pn_g_safe[:, None], 0.0)
    qtil_l = ag.div(p_l, ag.reshape(pn_l_safe, (n, 1)))
    pf_g = np.where(valid, (p_g * few).sum(-1) / pn_g_safe, 0.0)
    pr_g = np.where(valid, (p_g * rich).sum(-1) / pn_g_safe, 0.0)
    pf_l = ag.div(mass(few), pn_l_safe)
    pr_l = ag.div(mass(rich), pn_l_safe)

    vmask = valid.astype(p_g.dtype)

    def group_term(member_mask, lumped_g, lumped_l):
        inner = ag.sum(_kl_terms_graph(qtil_g * member_mask, qtil_l), axis=-1)
        return ag.mul(ag.add(inner, _kl_terms_graph(lumped_g, lumped_l)), vmask)

    return {"tc": tc, "rc": group_term(rich, pf_g, pf_l), "fc": group_term(few, pr_g, pr_l)}


def gd_loss_graph(p_g: np.ndarray, p_l: Tensor, labels, groups: ClassGroups, cfg: GDConfig) -> Tensor:
    """Batch mean of the weighted GD loss; zero-weight terms are not built."""
    terms = gd_terms_graph(p_g, p_l, labels, groups)
    total = None
    for key, w in (("tc", cfg.alpha_t), ("rc", cfg.alpha_r), ("fc", cfg.alpha_f)):
        if w:
            part = ag.mul(terms[key], w)
            total = part if total is None else ag.add(total, part)
    if total is None:
        return Tensor(np.zeros((), dtype=p_g.dtype))
    return ag.mean(total)


@dataclass
class CrossPredictions:
    """Logits of the four extractor/classifier pairings for one batch.

    The first letter names the extractor, the second the classifier:
    ``gl`` is the local classifier applied to global features.
    """

    logits_gg: Tensor
    logits_gl: Tensor
    logits_lg: Tensor
    logits_ll: Tensor
    local_params: list[Tensor] = field(default_factory=list)

    def probs(self, which: str, temperature: float = 1.0) -> Tensor:
        return ag.softmax(getattr(self, f"logits_{which}"), temperature)

    @property
    def y_gg(self) -> np.ndarray:
        return self.probs("gg").data

    @property
    def y_gl(self) -> np.ndarray:
        return self.probs("gl").data

    @property
    def y_lg(self) -> np.ndarray:
        return self.probs("lg").data

    @property
    def y_ll(self) -> np.ndarray:
        return self.probs("ll").data


def cross_predict(global_model: ModelParams, local, batch) -> CrossPredictions:
    """Cross the global/local extractors with the global/local classifiers.

    ``local`` is a :class:`ModelParams` (bound as trainable here) or an
    existing trainable :class:`BoundModel`. The global model is bound frozen,
    so its features enter the local classifier as constants and its
    classifier passes gradients through to local features only.
    """
    g = BoundModel(global_model, trainable=False)
    l = local if isinstance(local, BoundModel) else BoundModel(local, trainable=True)
    gdim = g.extractor.output_shape()
    ldim = l.extractor.output_shape()
    if gdim != l.classifier.input_shape or ldim != g.classifier.input_shape:
        raise ConfigError(f"feature dims do not cross: global {gdim}, local {ldim}")
    x = ag.as_tensor(np.asarray(batch, dtype=global_model.dtype))
    f_g = g.extract(x)
    f_l = l.extract(x)
    return CrossPredictions(
        logits_gg=g.classify(f_g),
        logits_gl=l.classify(f_g),
        logits_lg=g.classify(f_l),
        logits_ll=l.classify(f_l),
        local_params=l.parameters(),
    )


def composite_terms(preds: CrossPredictions, labels, groups: ClassGroups, cfg: CompositeLossConfig) -> dict[str, Tensor]:
    """CE on the local model plus whichever weighted terms have non-zero weight."""
    tau = cfg.gd.temperature
    terms = {"ce": cross_entropy_graph(preds.probs("ll"), labels)}
    teacher = preds.probs("gg", tau).data if (cfg.beta_L or cfg.beta_FC) else None
    if cfg.beta_L:
        terms["L_L"] = gd_loss_graph(teacher, preds.probs("ll", tau), labels, groups, cfg.gd)
    if cfg.beta_E:
        terms["L_E"] = cross_entropy_graph(preds.probs("lg"), labels)
    if cfg.beta_FC:
        terms["L_FC"] = gd_loss_graph(teacher, preds.probs("gl", tau), labels, groups, cfg.gd)
    return terms


def composite_loss(preds: CrossPredictions, labels, groups: ClassGroups, cfg: CompositeLossConfig) -> Tensor:
    terms = composite_terms(preds, labels, groups, cfg)
    weights = {"ce": 1.0, "L_L": cfg.beta_L, "L_E": cfg.beta_E, "L_FC": cfg.beta_FC}
    total = terms["ce"]
    for key in ("L_L", "L_E", "L_FC"):
        if key in terms:
            total = ag.add(total, ag.mul(terms[key], weights[key]))
    return total
