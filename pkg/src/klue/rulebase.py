"""Synthetic knowledge base: generation, validation, queries, serialization.

The rule base pairs forward implication rules (conjunction of concepts
implies a class literal) with their converses (class literal implies the
conjunction), built in two phases: a core phase sampling ``l`` positive
rules per class plus negative rules toward other classes, and a coverage
phase injecting every still-unused concept into one extra positive rule.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Optional

SCHEMA_VERSION = 1

POSITIVE = "pos"
NEGATIVE = "neg"
FORWARD = "fwd"
CONVERSE = "conv"


class RuleBaseError(Exception):
    pass


class RuleBaseParseError(RuleBaseError):
    pass


@dataclass(frozen=True, order=True)
class Rule:
    """One implication rule.

    Forward rules read (AND antecedent) -> class literal; converse rules
    read class literal -> (AND antecedent) over the same concept set.
    ``origin_class`` is the class whose positive sampling produced the
    antecedent.
    """

    origin_class: int
    direction: str
    polarity: str
    class_index: int
    antecedent: tuple

    def is_positive(self) -> bool:
        return self.polarity == POSITIVE


@dataclass
class GenerationStats:
    """Per-phase rule counts, kept out of the serialized format."""

    phase1_positive_per_class: list
    phase1_negative_per_class: list
    phase2_rules: int


@dataclass
class RuleBase:
    T: int
    K: int
    l: int
    q_min: int
    q_max: int
    p_neg: float
    seed: int
    phase2_negatives: bool
    rules: list
    usage: dict = field(default_factory=dict)
    stats: Optional[GenerationStats] = field(default=None, compare=False)

    def __eq__(self, other):
        if not isinstance(other, RuleBase):
            return NotImplemented
        return (
            (self.T, self.K, self.l, self.q_min, self.q_max, self.p_neg,
             self.seed, self.phase2_negatives, self.usage)
            == (other.T, other.K, other.l, other.q_min, other.q_max,
                other.p_neg, other.seed, other.phase2_negatives, other.usage)
            and sorted(self.rules) == sorted(other.rules)
        )

    def forward_rules(self):
        return [r for r in self.rules if r.direction == FORWARD]

    def converse_rules(self):
        return [r for r in self.rules if r.direction == CONVERSE]


def _compute_usage(rules, T: int) -> dict:
    """Occurrence counter over antecedents of forward-positive rules."""
    usage = {s: 0 for s in range(T)}
    for r in rules:
        if r.direction == FORWARD and r.polarity == POSITIVE:
            for s in r.antecedent:
                usage[s] += 1
    return usage


def generate(
    T: int,
    K: int,
    l: int,
    q_min: int,
    q_max: int,
    p_neg: float,
    seed: int,
    phase2_negatives: bool = False,
) -> RuleBase:
    """Build the rule base deterministically from the seed.

    Phase 1: per class, ``l`` positive rules with antecedent size uniform
    in [q_min, q_max] (concepts sampled without replacement), each
    spawning floor(p_neg * (K-1)) negative rules toward distinct other
    classes; every forward rule spawns its converse.  Phase 2: each
    concept unused after phase 1 is injected into one new positive rule
    for a random class (negatives optional, off by default).
    """
    problems = []
    if not (isinstance(T, int) and isinstance(K, int) and isinstance(l, int)):
        problems.append("T, K, l must be integers")
    if K < 2:
        problems.append(f"K must be >= 2, got {K}")
    if l < 1:
        problems.append(f"l must be >= 1, got {l}")
    if not 1 <= q_min <= q_max:
        problems.append(f"need 1 <= q_min <= q_max, got [{q_min}, {q_max}]")
    if q_max > T:
        problems.append(f"q_max={q_max} exceeds concept count T={T}")
    if not 0.0 <= p_neg <= 1.0:
        problems.append(f"p_neg must be in [0, 1], got {p_neg}")
    if problems:
        raise RuleBaseError("invalid generation parameters: " + "; ".join(problems))

    rng = random.Random(seed)
    concepts = list(range(T))
    classes = list(range(K))
    rules = []
    usage = {s: 0 for s in concepts}
    phase1_pos = [0] * K
    phase1_neg = [0] * K

    def emit(antecedent, class_index, polarity, origin):
        rules.append(Rule(origin, FORWARD, polarity, class_index, antecedent))
        rules.append(Rule(origin, CONVERSE, polarity, class_index, antecedent))

    def emit_rule_group(origin, count_pos=None, count_neg=None):
        q = rng.randint(q_min, q_max)
        antecedent = tuple(sorted(rng.sample(concepts, q)))
        for s in antecedent:
            usage[s] += 1
        emit(antecedent, origin, POSITIVE, origin)
        if count_pos is not None:
            count_pos[origin] += 1
        if p_neg > 0:
            others = [y for y in classes if y != origin]
            n_neg = int(p_neg * len(others))
            for y_neg in rng.sample(others, n_neg):
                emit(antecedent, y_neg, NEGATIVE, origin)
                if count_neg is not None:
                    count_neg[y_neg] += 1
        return antecedent

    # Phase 1: core
    for y in classes:
        for _ in range(l):
            emit_rule_group(y, phase1_pos, phase1_neg)

    # Phase 2: concept coverage (snapshot of unused concepts)
    unused = [s for s in concepts if usage[s] == 0]
    phase2 = 0
    for s_star in unused:
        q = rng.randint(q_min, q_max)
        pool = [s for s in concepts if s != s_star]
        extra = rng.sample(pool, max(0, q - 1))
        antecedent = tuple(sorted(extra + [s_star]))
        y_star = rng.choice(classes)
        for s in antecedent:
            usage[s] += 1
        emit(antecedent, y_star, POSITIVE, y_star)
        phase2 += 1
        if phase2_negatives and p_neg > 0:
            others = [y for y in classes if y != y_star]
            n_neg = int(p_neg * len(others))
            for y_neg in rng.sample(others, n_neg):
                emit(antecedent, y_neg, NEGATIVE, y_star)
                phase2 += 1

    rng.shuffle(rules)
    return RuleBase(
        T=T,
        K=K,
        l=l,
        q_min=q_min,
        q_max=q_max,
        p_neg=p_neg,
        seed=seed,
        phase2_negatives=phase2_negatives,
        rules=rules,
        usage=usage,
        stats=GenerationStats(phase1_pos, phase1_neg, phase2),
    )


def validate(rb: RuleBase) -> list:
    """Check the rule-base invariants; returns violation messages
    (empty list means valid)."""
    violations = []

    for i, r in enumerate(rb.rules):
        if not r.antecedent:
            violations.append(f"rule {i}: empty antecedent")
        if len(set(r.antecedent)) != len(r.antecedent):
            violations.append(f"rule {i}: duplicate concepts in antecedent")
        if tuple(sorted(r.antecedent)) != r.antecedent:
            violations.append(f"rule {i}: antecedent not canonically sorted")
        if any(not 0 <= s < rb.T for s in r.antecedent):
            violations.append(f"rule {i}: concept index out of range")
        if not 0 <= r.class_index < rb.K:
            violations.append(f"rule {i}: class index {r.class_index} out of range")
        if not 0 <= r.origin_class < rb.K:
            violations.append(f"rule {i}: origin class out of range")
        if r.direction not in (FORWARD, CONVERSE):
            violations.append(f"rule {i}: bad direction {r.direction!r}")
        if r.polarity not in (POSITIVE, NEGATIVE):
            violations.append(f"rule {i}: bad polarity {r.polarity!r}")
        if not rb.q_min <= len(r.antecedent) <= rb.q_max:
            violations.append(
                f"rule {i}: antecedent size {len(r.antecedent)} outside "
                f"[{rb.q_min}, {rb.q_max}]"
            )

    fwd_pos_per_class = {k: 0 for k in range(rb.K)}
    for r in rb.forward_rules():
        if r.polarity == POSITIVE:
            fwd_pos_per_class[r.class_index] += 1
    for k, n in fwd_pos_per_class.items():
        if n < rb.l:
            violations.append(
                f"class {k}: only {n} forward-positive rules, expected >= {rb.l}"
            )

    covered = set()
    for r in rb.forward_rules():
        if r.polarity == POSITIVE:
            covered.update(r.antecedent)
    for s in range(rb.T):
        if s not in covered:
            violations.append(f"concept {s}: not covered by any forward-positive rule")

    fwd = sorted(
        (r.origin_class, r.polarity, r.class_index, r.antecedent)
        for r in rb.forward_rules()
    )
    conv = sorted(
        (r.origin_class, r.polarity, r.class_index, r.antecedent)
        for r in rb.converse_rules()
    )
    if fwd != conv:
        violations.append(
            "bidirectionality broken: forward and converse rule multisets differ"
        )

    expected_usage = _compute_usage(rb.rules, rb.T)
    if rb.usage != expected_usage:
        violations.append("usage counters inconsistent with forward-positive rules")

    return violations


def rules_for_class(rb: RuleBase, k: int, direction: str, polarity: str) -> list:
    if not 0 <= k < rb.K:
        raise RuleBaseError(f"class index {k} out of range [0, {rb.K})")
    return [
        r
        for r in rb.rules
        if r.class_index == k and r.direction == direction and r.polarity == polarity
    ]


def _canonical_rules(rules) -> list:
    return sorted(rules)


def serialize(rb: RuleBase) -> bytes:
    """UTF-8 JSON with canonically sorted rules; deterministic bytes."""
    doc = {
        "version": SCHEMA_VERSION,
        "T": rb.T,
        "K": rb.K,
        "l": rb.l,
        "q_min": rb.q_min,
        "q_max": rb.q_max,
        "p_neg": rb.p_neg,
        "seed": rb.seed,
        "phase2_negatives": rb.phase2_negatives,
        "rules": [
            {
                "antecedent": list(r.antecedent),
                "class": r.class_index,
                "polarity": r.polarity,
                "direction": r.direction,
                "origin": r.origin_class,
            }
            for r in _canonical_rules(rb.rules)
        ],
    }
    return (json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n").encode(
        "utf-8"
    )


def deserialize(data: bytes) -> RuleBase:
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        offset = getattr(exc, "pos", getattr(exc, "start", 0))
        raise RuleBaseParseError(
            f"malformed rule-base payload at byte offset {offset}: {exc}"
        ) from exc
    if not isinstance(doc, dict):
        raise RuleBaseParseError("rule-base payload is not a JSON object")
    version = doc.get("version")
    if version != SCHEMA_VERSION:
        raise RuleBaseParseError(
            f"unsupported rule-base version {version!r} (expected {SCHEMA_VERSION})"
        )
    try:
        rules = [
            Rule(
                origin_class=int(r["origin"]),
                direction=str(r["direction"]),
                polarity=str(r["polarity"]),
                class_index=int(r["class"]),
                antecedent=tuple(int(s) for s in r["antecedent"]),
            )
            for r in doc["rules"]
        ]
        rb = RuleBase(
            T=int(doc["T"]),
            K=int(doc["K"]),
            l=int(doc["l"]),
            q_min=int(doc["q_min"]),
            q_max=int(doc["q_max"]),
            p_neg=float(doc["p_neg"]),
            seed=int(doc["seed"]),
            phase2_negatives=bool(doc["phase2_negatives"]),
            rules=rules,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise RuleBaseParseError(f"malformed rule-base field: {exc}") from exc
    rb.usage = _compute_usage(rb.rules, rb.T)
    return rb


def per_class_counts(rb: RuleBase) -> dict:
    """Derived per-class counts of forward positive (M) / negative (N) rules."""
    counts = {k: {"positive": 0, "negative": 0} for k in range(rb.K)}
    for r in rb.forward_rules():
        key = "positive" if r.polarity == POSITIVE else "negative"
        counts[r.class_index][key] += 1
    return counts
