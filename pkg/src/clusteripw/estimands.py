"""Estimand identifiers: population means, overall effects, spillover effects."""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import ConfigurationError, DomainError

KINDS = ("mu", "mu0", "mu1", "oe", "se0", "se1", "mu_typeB", "oe_typeB")
CONTRASTS = {"oe", "se0", "se1", "oe_typeB"}

# kind -> (outcome arm or None, base mean kind)
_ARM = {"mu": None, "mu0": 0, "mu1": 1, "oe": None, "se0": 0, "se1": 1, "mu_typeB": None, "oe_typeB": None}


@dataclass(frozen=True)
class EstimandSpec:
    """One target: ``kind`` at policy ``alpha`` (and ``alpha_prime`` for contrasts).

    Contrasts are ``target(alpha) - target(alpha_prime)``.
    """

    kind: str
    alpha: float
    alpha_prime: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown estimand kind {self.kind!r}; expected one of {KINDS}")
        for a in (self.alpha, self.alpha_prime):
            if a is not None and not 0.0 < float(a) < 1.0:
                raise DomainError(f"policy values must lie in (0, 1), got {a}")
        if self.is_contrast and self.alpha_prime is None:
            raise ConfigurationError(f"{self.kind} needs alpha_prime")
        if not self.is_contrast and self.alpha_prime is not None:
            raise ConfigurationError(f"{self.kind} takes a single policy")
        object.__setattr__(self, "alpha", float(self.alpha))
        if self.alpha_prime is not None:
            object.__setattr__(self, "alpha_prime", float(self.alpha_prime))

    @property
    def is_contrast(self) -> bool:
        return self.kind in CONTRASTS

    @property
    def is_type_b(self) -> bool:
        return self.kind.endswith("_typeB")

    @property
    def arm(self) -> int | None:
        """Outcome arm averaged over (0 = untreated, 1 = treated), None for all individuals."""
        return _ARM[self.kind]

    @property
    def alphas(self) -> tuple[float, ...]:
        return (self.alpha,) if self.alpha_prime is None else (self.alpha, self.alpha_prime)

    @property
    def base_kind(self) -> str:
        """Mean kind whose difference forms this contrast (or the kind itself)."""
        return {"oe": "mu", "se0": "mu0", "se1": "mu1", "oe_typeB": "mu_typeB"}.get(self.kind, self.kind)

    @property
    def label(self) -> str:
        if self.alpha_prime is None:
            return f"{self.kind}({self.alpha:g})"
        return f"{self.kind}({self.alpha:g},{self.alpha_prime:g})"

    def __str__(self) -> str:
        return self.label

    @classmethod
    def parse(cls, text: str) -> "EstimandSpec":
        m = re.fullmatch(r"\s*(\w+)\(\s*([0-9.eE+-]+)\s*(?:,\s*([0-9.eE+-]+)\s*)?\)\s*", text)
        if not m:
            raise ConfigurationError(f"cannot parse estimand {text!r}; expected e.g. 'mu(0.4)' or 'oe(0.5,0.4)'")
        kind, a, ap = m.groups()
        return cls(kind, float(a), None if ap is None else float(ap))


def standard_estimands(alphas=(0.4, 0.5, 0.55)) -> list[EstimandSpec]:
    """Means at each policy and contrasts of every later policy against every earlier one."""
    pairs = [(alphas[j], alphas[i]) for i in range(len(alphas)) for j in range(i + 1, len(alphas))]
    pairs.sort(key=lambda p: (alphas.index(p[0]), alphas.index(p[1])))
    out = []
    for mean_kind, contrast_kind in (("mu", "oe"), ("mu0", "se0"), ("mu1", "se1")):
        out += [EstimandSpec(mean_kind, a) for a in alphas]
        out += [EstimandSpec(contrast_kind, a, ap) for a, ap in pairs]
    return out
