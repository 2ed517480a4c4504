"""Cross-validation fold plans with institution- or patient-disjoint splits."""

from dataclasses import dataclass, field

import numpy as np

from ..errors import PreconditionError, ValidationError

SPLITS = ("train", "val", "test")


@dataclass
class FoldPlan:
    """``bins[g]`` lists the grouping units packed into bin ``g``.

    Fold ``f`` tests on bin ``f``, validates on bin ``f+1`` (mod k) when
    ``with_validation`` and trains on the rest.  Units are institutions when
    ``constraint == "institution"``, otherwise patients.
    """

    constraint: str
    k: int
    seed: int
    with_validation: bool
    bins: list
    slide_unit: dict  # slide_id -> unit id
    slide_patient: dict  # slide_id -> patient id
    slide_institution: dict = field(default_factory=dict)

    def bin_of_unit(self):
        return {u: g for g, units in enumerate(self.bins) for u in units}

    def split_of_bin(self, fold, g):
        if g == fold:
            return "test"
        if self.with_validation and g == (fold + 1) % self.k:
            return "val"
        return "train"

    def slides(self, fold, split):
        b = self.bin_of_unit()
        return [s for s, u in self.slide_unit.items() if self.split_of_bin(fold, b[u]) == split]

    def patients(self, fold, split):
        seen = {}
        for s in self.slides(fold, split):
            seen.setdefault(self.slide_patient[s], None)
        return list(seen)

    def fractions(self, fold):
        n = len(self.slide_unit)
        return {s: len(self.slides(fold, s)) / n for s in SPLITS}

    def assignments(self):
        """Rows ``(fold, split, slide_id, patient_id, unit)`` in plan order."""
        b = self.bin_of_unit()
        rows = []
        for f in range(self.k):
            for s, u in self.slide_unit.items():
                rows.append((f, self.split_of_bin(f, b[u]), s, self.slide_patient[s], u))
        return rows


def make_folds(manifest, k=5, constraint="institution", seed=0, with_validation=True):
    """Greedy largest-first packing of units into ``k`` bins.

    Units (institutions or patients) are sorted by slide count, largest
    first, with ties ordered by a seeded shuffle; each goes to the currently
    lightest bin (lowest index on ties).
    """
    if constraint not in ("institution", "patient"):
        raise ValidationError(f"unknown fold constraint {constraint!r}")
    if k < 2 or (with_validation and k < 3):
        raise PreconditionError(f"k={k} folds cannot hold the requested splits")
    slide_patient = {s.slide_id: s.patient_id for s in manifest.slides}
    slide_inst = {s.slide_id: s.institution_id for s in manifest.slides}
    slide_unit = slide_inst if constraint == "institution" else slide_patient
    sizes = {}
    for s in manifest.slides:
        u = slide_unit[s.slide_id]
        sizes[u] = sizes.get(u, 0) + 1
    units = sorted(sizes)
    if len(units) < k:
        raise PreconditionError(f"{len(units)} {constraint}(s) cannot fill {k} disjoint folds")
    rng = np.random.default_rng(seed)
    tiebreak = {u: r for u, r in zip(units, rng.permutation(len(units)))}
    order = sorted(units, key=lambda u: (-sizes[u], tiebreak[u]))
    bins = [[] for _ in range(k)]
    load = np.zeros(k, dtype=np.int64)
    for u in order:
        g = int(np.argmin(load))
        bins[g].append(u)
        load[g] += sizes[u]
    plan = FoldPlan(constraint, k, seed, with_validation, bins, dict(slide_unit), slide_patient, slide_inst)
    audit_fold_plan(plan)
    return plan


def audit_fold_plan(plan):
    """Raise ValidationError if any fold shares a patient (or institution) across splits."""
    for f in range(plan.k):
        seen_patient, seen_inst = {}, {}
        for s in SPLITS:
            for slide in plan.slides(f, s):
                p = plan.slide_patient[slide]
                if seen_patient.setdefault(p, s) != s:
                    raise ValidationError(f"fold {f}: patient {p} appears in {seen_patient[p]} and {s}")
                if plan.constraint == "institution":
                    i = plan.slide_institution[slide]
                    if seen_inst.setdefault(i, s) != s:
                        raise ValidationError(f"fold {f}: institution {i} appears in {seen_inst[i]} and {s}")
    return True
