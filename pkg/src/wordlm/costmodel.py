"""Closed-form training/generation efficiency model and attention counters.

Activation memory for a causal transformer scales as L*D*B*T^2, so a fixed
memory budget M pins the batch size B per tokenizer scheme; corpus passes
then need X = N/(B*T) optimizer steps. Everything here is exact arithmetic
on those formulas; `reconcile` closes the loop against step counts audited
during real generation.

M is measured in activation entries (dimensionless): it only ever appears
in ratios, so unit constants cancel.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError

# chars per word, measured on real text per language
PRESETS = {"en": 5.5, "fr": 5.2, "ru": 6.4}
# chars per subword token of a ~50k BPE vocabulary
SUBWORD_CHARS = 2.8

KINDS = ("base", "subword", "e2e")

# The end-to-end training speed-up formula T/(c/2 + T/c^2) evaluates to
# ~21.1 at (c=5.5, T=192), but the commonly quoted headline figure for
# that same operating point is 6.8x. The two could not be reconciled from
# the printed derivation, so this module returns the formula value
# unchanged and surfaces both numbers instead of guessing.
E2E_SPEEDUP_NOTE = (
    "e2e training speed-up: formula T/(c/2 + T/c^2) gives "
    "{formula:.1f} at c={c}, T={T}; the quoted headline for this "
    "operating point is {headline}x. Reported value is the formula's; "
    "both are shown because the source arithmetic does not reconcile."
)
E2E_HEADLINE_SPEEDUP = 6.8


@dataclass(frozen=True)
class CostModelParams:
    """Inputs to the analytic model; M in activation entries."""

    M: float = 1e9
    L: int = 8
    D: int = 512
    T: int = 192
    N_corpus: float = 1e9
    c: float = 5.5
    s: float = 2.8
    t: float = 1.0

    def __post_init__(self):
        for name in ("M", "L", "D", "T", "N_corpus", "c", "s", "t"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be strictly positive")
        if self.c <= 1:
            raise ConfigError("c (chars per word) must exceed 1")
        if self.s < 1:
            raise ConfigError("s (chars per subword) must be >= 1")


def _check_kind(kind: str) -> None:
    if kind not in KINDS:
        raise ConfigError(f"unknown kind {kind!r}; expected one of {KINDS}")


def optimal_batch(kind: str, p: CostModelParams) -> float:
    """Largest batch that fits the activation budget, exact real value."""
    _check_kind(kind)
    if kind == "base":
        return p.M / (p.L * p.D * p.T**2)
    if kind == "subword":
        # T/s tokens cover T chars, so the T^2 term shrinks by s^2
        return p.M / (p.L * p.D * p.T**2 / p.s**2)
    # hierarchical: intra-word blocks cost T*c/2, word-level attention T^2/c^2
    return p.M / (p.L * p.D * p.T * (p.c / 2 + p.T / p.c**2))


def training_steps(kind: str, p: CostModelParams) -> float:
    """Optimizer steps for one corpus pass at the optimal batch: X = N/(B*T)."""
    return p.N_corpus / (optimal_batch(kind, p) * p.T)


def training_speedup(kind: str, p: CostModelParams) -> float:
    """Step-count ratio X_base / X_kind; base is 1 by definition."""
    _check_kind(kind)
    if kind == "base":
        return 1.0
    if kind == "subword":
        return p.s**2
    return p.T / (p.c / 2 + p.T / p.c**2)


def generation_speed(kind: str, p: CostModelParams) -> float:
    """Greedy decoding throughput in chars per t-unit: 1/t, s/t, 4/t."""
    _check_kind(kind)
    if kind == "base":
        return 1.0 / p.t
    if kind == "subword":
        return p.s / p.t
    return 4.0 / p.t


def attention_density(T: float, c: float, n_cls: int, mode: str) -> float:
    """Cross-word fraction of attention entries under word segmentation.

    flat_causal: causal T-char stream, words of c chars; intra-word
    entries are T*(c+1)/2 of the T*(T+1)/2 total. intra_word: the
    block-diagonal encoder layout ((c+n_cls)^2 per word, T/c words)
    against a full bidirectional T^2 baseline.
    """
    if not T >= c >= 1:
        raise ConfigError("need T >= c >= 1")
    if mode == "flat_causal":
        total = T * (T + 1) / 2
        intra = (T / c) * (c * (c + 1) / 2)
    elif mode == "intra_word":
        total = float(T) ** 2
        intra = (T / c) * (c + n_cls) ** 2
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    return 1.0 - intra / total


def reconcile(measured, p: CostModelParams) -> dict:
    """Analytic vs audited generation cost, one row per audit.

    Accepts one step_count_audit dict or a list of them. Each row compares
    the audit's wall-step speed ratio against the analytic prediction for
    its mode (flat -> 1, hierarchical pipelined -> the e2e constant;
    sequential is reported against the same bound for reference).
    """
    audits = measured if isinstance(measured, list) else [measured]
    rows = []
    for audit in audits:
        mode = audit["mode"]
        walls = audit["wall_steps"]
        if mode == "flat":
            measured_ratio = 1.0
            analytic = 1.0
        else:
            wall = walls["pipelined"] if mode == "pipelined" else walls["sequential"]
            measured_ratio = walls["flat_equivalent"] / wall if wall else float("nan")
            analytic = generation_speed("e2e", p) * p.t
        deviation = abs(measured_ratio - analytic) / analytic
        rows.append(
            {
                "mode": mode,
                "measured_ratio": measured_ratio,
                "analytic_ratio": analytic,
                "relative_deviation": deviation,
            }
        )
    return {"rows": rows}


def summary_report(p: CostModelParams, n_cls: int = 4) -> dict:
    """All model quantities for one parameter point, plus caveat notes."""
    report = {
        "params": {
            "M": p.M,
            "L": p.L,
            "D": p.D,
            "T": p.T,
            "N_corpus": p.N_corpus,
            "c": p.c,
            "s": p.s,
            "t": p.t,
            "n_cls": n_cls,
        },
        "optimal_batch": {k: optimal_batch(k, p) for k in KINDS},
        "training_steps": {k: training_steps(k, p) for k in KINDS},
        "training_speedup": {k: training_speedup(k, p) for k in KINDS},
        "generation_speed": {k: generation_speed(k, p) for k in KINDS},
        "attention": {
            "causal_cross_word_fraction": attention_density(p.T, p.c, 0, "flat_causal"),
            "encoder_cross_word_fraction": attention_density(p.T, p.c, n_cls, "intra_word"),
        },
        "notes": [
            E2E_SPEEDUP_NOTE.format(
                formula=training_speedup("e2e", p),
                c=p.c,
                T=p.T,
                headline=E2E_HEADLINE_SPEEDUP,
            )
        ],
    }
    return report


def format_report(report: dict) -> str:
    """Delimited text table for terminals and logs."""
    lines = []
    par = report["params"]
    lines.append(
        "params\t" + "\t".join(f"{k}={par[k]:g}" if k != "n_cls" else f"{k}={par[k]}" for k in par)
    )
    header = "quantity\t" + "\t".join(KINDS)
    lines.append(header)
    for key in ("optimal_batch", "training_steps", "training_speedup", "generation_speed"):
        row = report[key]
        lines.append(key + "\t" + "\t".join(f"{row[k]:.4g}" for k in KINDS))
    att = report["attention"]
    for k, v in att.items():
        lines.append(f"{k}\t{v:.4f}")
    for note in report["notes"]:
        lines.append(f"note\t{note}")
    return "\n".join(lines)
