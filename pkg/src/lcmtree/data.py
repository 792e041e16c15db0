"""Multi-domain binary response data with partially observed category labels.

The on-disk format is UTF-8 CSV with header ``id,domain,cause,item_1,...,item_J``.
Item values are 0, 1 or the literal token ``NA`` (case-sensitive); an empty
cause field marks an unobserved label.  Domain and cause values must be leaf
ids of the respective trees; leaf positions define the internal integer codes
(domain 0 is the leaf in position 0 of the domain tree's leaf order, causes
are positions 0..C-1).  Datasets are immutable after load.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class MissingnessScenario:
    """Pattern of observed/missing labels across domains.

    tag is one of:
      "i-1"  exactly one domain has missing labels and none observed there
      "i-2"  exactly one domain has missing labels, mixed with observed ones
      "ii"   two or more domains have missing labels
      "iii"  no label is missing anywhere
    """

    tag: str
    domains_with_missing: tuple[int, ...]


@dataclass(frozen=True)
class Dataset:
    """N x J binary responses with missingness, domain codes, partial labels.

    X stores a placeholder (0) at missing entries; ``observed`` is the matrix
    mask and is the only authority on which entries exist.  Y uses -1 for a
    missing label, 0..C-1 otherwise.  D holds domain codes 0..G.
    """

    X: np.ndarray
    observed: np.ndarray
    Y: np.ndarray
    D: np.ndarray
    subject_ids: tuple[str, ...]
    item_names: tuple[str, ...]
    domain_leaves: tuple[str, ...]
    cause_leaves: tuple[str, ...]

    def __post_init__(self):
        if self.X.shape != self.observed.shape or self.X.shape[0] != len(self.Y):
            raise DataError("inconsistent array shapes in Dataset")
        for arr in (self.X, self.observed, self.Y, self.D):
            arr.setflags(write=False)

    @property
    def n_subjects(self):
        return self.X.shape[0]

    @property
    def n_items(self):
        return self.X.shape[1]

    @property
    def n_causes(self):
        return len(self.cause_leaves)

    @property
    def n_domains(self):
        return len(self.domain_leaves)

    def observed_item_sets(self):
        """Per-subject arrays of observed item indices."""
        return [np.nonzero(self.observed[i])[0] for i in range(self.n_subjects)]

    def observed_subject_sets(self):
        """Per-item arrays of subject indices with that item observed."""
        return [np.nonzero(self.observed[:, j])[0] for j in range(self.n_items)]

    def serialize(self):
        """CSV text accepted back by :func:`load_dataset`."""
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["id", "domain", "cause"] + list(self.item_names))
        for i in range(self.n_subjects):
            cause = "" if self.Y[i] < 0 else self.cause_leaves[self.Y[i]]
            cells = [
                str(int(self.X[i, j])) if self.observed[i, j] else "NA"
                for j in range(self.n_items)
            ]
            writer.writerow([self.subject_ids[i], self.domain_leaves[self.D[i]], cause] + cells)
        return out.getvalue()


def load_dataset(document, domain_tree, cause_tree):
    """Parse and validate a data document against the two trees."""
    rows = list(csv.reader(io.StringIO(document.strip())))
    if not rows:
        raise DataError("empty data document")
    header = rows[0]
    if len(header) < 4 or [h.strip().lower() for h in header[:3]] != ["id", "domain", "cause"]:
        raise DataError("data header must be id,domain,cause,<item columns...>")
    item_names = tuple(h.strip() for h in header[3:])
    n_items = len(item_names)

    dom_code = {leaf: g for g, leaf in enumerate(domain_tree.leaf_order)}
    cause_code = {leaf: c for c, leaf in enumerate(cause_tree.leaf_order)}

    ids, D, Y = [], [], []
    X = []
    observed = []
    seen = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3 + n_items:
            raise DataError(f"line {lineno}: expected {3 + n_items} fields, got {len(row)}")
        sid = row[0].strip()
        if sid in seen:
            raise DataError(f"line {lineno}: duplicate subject id {sid!r}")
        seen.add(sid)
        dom = row[1].strip()
        if dom not in dom_code:
            raise DataError(f"line {lineno}: domain {dom!r} is not a leaf of the domain tree")
        cause = row[2].strip()
        if cause == "":
            y = -1
        elif cause in cause_code:
            y = cause_code[cause]
        else:
            raise DataError(f"line {lineno}: cause {cause!r} is not a leaf of the cause tree")
        xrow = np.zeros(n_items, dtype=np.int8)
        mrow = np.zeros(n_items, dtype=bool)
        for j, cell in enumerate(row[3:]):
            cell = cell.strip()
            if cell == "NA":
                continue
            if cell == "0" or cell == "1":
                xrow[j] = int(cell)
                mrow[j] = True
            else:
                raise DataError(f"line {lineno}: item value {cell!r} not in {{0,1,NA}}")
        ids.append(sid)
        D.append(dom_code[dom])
        Y.append(y)
        X.append(xrow)
        observed.append(mrow)

    if not ids:
        raise DataError("data document has no subject rows")
    return Dataset(
        X=np.array(X, dtype=np.int8),
        observed=np.array(observed, dtype=bool),
        Y=np.array(Y, dtype=np.int64),
        D=np.array(D, dtype=np.int64),
        subject_ids=tuple(ids),
        item_names=item_names,
        domain_leaves=tuple(domain_tree.leaf_order),
        cause_leaves=tuple(cause_tree.leaf_order),
    )


def detect_scenario(dataset):
    """Classify the pattern of missing labels by domain."""
    missing = dataset.Y < 0
    doms = []
    for g in range(dataset.n_domains):
        in_g = dataset.D == g
        if np.any(missing & in_g):
            doms.append(g)
    doms = tuple(doms)
    if not doms:
        return MissingnessScenario("iii", doms)
    if len(doms) >= 2:
        return MissingnessScenario("ii", doms)
    g = doms[0]
    has_observed = np.any((dataset.D == g) & ~missing)
    return MissingnessScenario("i-2" if has_observed else "i-1", doms)
