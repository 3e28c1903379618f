"""Labeled function corpora: JSONL ingestion, splits, statistics.

Corpus format is JSONL, one object per line with fields ``id`` (string),
``code`` (full function source), ``label`` (0/1 function-level truth),
``vul_lines`` (1-based line numbers of the vulnerability-relevant lines,
empty unless label is 1) and an optional ``cwe`` pass-through tag.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "FunctionSample",
    "SplitSpec",
    "CorpusError",
    "load_corpus",
    "save_corpus",
    "split",
    "class_stats",
    "truncation_stats",
    "format_stats_table",
    "convert_csv_corpus",
    "synthesize_corpus",
]


class CorpusError(ValueError):
    """A corpus file or record violates the schema."""


@dataclass(frozen=True)
class FunctionSample:
    id: str
    code: str
    label: int
    vul_lines: frozenset[int] = frozenset()
    cwe: str | None = None

    def line_count(self) -> int:
        return len(self.code.split("\n"))

    def validate(self) -> None:
        if self.label not in (0, 1):
            raise CorpusError(f"sample {self.id!r}: label must be 0 or 1")
        if self.label == 0 and self.vul_lines:
            raise CorpusError(
                f"sample {self.id!r}: label 0 but vul_lines {sorted(self.vul_lines)}"
            )
        n_lines = self.line_count()
        for ln in self.vul_lines:
            if not (1 <= ln <= n_lines):
                raise CorpusError(
                    f"sample {self.id!r}: vul_line {ln} outside [1, {n_lines}]"
                )


@dataclass(frozen=True)
class SplitSpec:
    """Fractions for the train/evaluation/test partition plus the shuffle seed."""

    train: float = 0.8
    evaluation: float = 0.1
    test: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        fr = (self.train, self.evaluation, self.test)
        if any(f < 0 for f in fr):
            raise CorpusError(f"split fractions must be nonnegative, got {fr}")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise CorpusError(f"split fractions must sum to 1, got {fr}")


def _sample_from_record(obj: dict, lineno: int) -> FunctionSample:
    try:
        sample = FunctionSample(
            id=str(obj["id"]),
            code=str(obj["code"]),
            label=int(obj["label"]),
            vul_lines=frozenset(int(v) for v in obj.get("vul_lines", [])),
            cwe=obj.get("cwe"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CorpusError(f"line {lineno}: bad record ({exc})") from exc
    try:
        sample.validate()
    except CorpusError as exc:
        raise CorpusError(f"line {lineno}: {exc}") from exc
    return sample


def load_corpus(path: str) -> list[FunctionSample]:
    """Load and validate a JSONL corpus, preserving file order."""
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
            samples.append(_sample_from_record(obj, lineno))
    return samples


def save_corpus(samples: list[FunctionSample], path: str) -> None:
    """Serialize with normalized field order; load(save(x)) == x."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            obj = {
                "id": s.id,
                "code": s.code,
                "label": s.label,
                "vul_lines": sorted(s.vul_lines),
            }
            if s.cwe is not None:
                obj["cwe"] = s.cwe
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def split(
    corpus: list[FunctionSample], spec: SplitSpec, stratify: bool = False
) -> tuple[list[FunctionSample], list[FunctionSample], list[FunctionSample]]:
    """Seeded-shuffle partition into (train, evaluation, test).

    Sizes come from cumulative floor boundaries so |train| = floor(f_train*N)
    and the leftover lands in test; for N=188,636 at 80/10/10 this yields the
    nominal 150,908 / 18,864 / 18,864. With ``stratify`` the same rule is
    applied per label class.
    """
    spec.validate()

    def partition(items: list[FunctionSample], seed_tag: int):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, seed_tag]))
        order = rng.permutation(len(items))
        shuffled = [items[i] for i in order]
        n = len(items)
        b1 = int(np.floor(spec.train * n))
        b2 = int(np.floor((spec.train + spec.evaluation) * n))
        return shuffled[:b1], shuffled[b1:b2], shuffled[b2:]

    if not stratify:
        return partition(corpus, 0)
    train, ev, test = [], [], []
    for label in (0, 1):
        tr, e, te = partition([s for s in corpus if s.label == label], label + 1)
        train += tr
        ev += e
        test += te
    return train, ev, test


def class_stats(samples: list[FunctionSample]) -> dict:
    total = len(samples)
    vul = sum(1 for s in samples if s.label == 1)
    return {
        "total": total,
        "vulnerable": vul,
        "non_vulnerable": total - vul,
        "ratio": (vul / total) if total else 0.0,
    }


def truncation_stats(
    samples: list[FunctionSample],
    token_length,
    limits: tuple[int, ...] = (512, 1024, 2048),
) -> list[dict]:
    """Count samples whose token stream fits each limit (all / vulnerable).

    ``token_length`` maps a sample to its full (untruncated) token count.
    """
    lengths = [(token_length(s), s.label) for s in samples]
    rows = []
    for limit in limits:
        fit = sum(1 for n, _ in lengths if n <= limit)
        fit_vul = sum(1 for n, lab in lengths if n <= limit and lab == 1)
        rows.append({
            "limit": limit,
            "untruncated": fit,
            "untruncated_vulnerable": fit_vul,
            "total": len(samples),
            "total_vulnerable": sum(1 for _, lab in lengths if lab == 1),
        })
    return rows


def format_stats_table(rows: list[dict]) -> str:
    """Aligned-column text rendering of a list of flat dicts."""
    if not rows:
        return ""
    cols = list(rows[0])
    table = [cols] + [[str(r[c]) for c in cols] for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(cols))]
    return "\n".join(
        "  ".join(cell.rjust(widths[i]) for i, cell in enumerate(row))
        for row in table
    )


def convert_csv_corpus(
    csv_path: str,
    out_path: str,
    code_column: str = "processed_func",
    label_column: str = "target",
    lines_column: str = "flaw_line_index",
    id_column: str | None = None,
    cwe_column: str | None = "CWE ID",
    zero_based_lines: bool = True,
) -> int:
    """Convert a big_vul-style CSV into the JSONL corpus schema.

    Flaw line indices are comma-separated in the CSV and 0-based by
    convention; they come out as 1-based ``vul_lines``. Returns the number
    of converted records. Records whose converted form violates the schema
    are rejected with their CSV row number.
    """
    samples = []
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for rownum, rec in enumerate(reader, start=2):  # header is row 1
            if code_column not in rec or label_column not in rec:
                raise CorpusError(
                    f"row {rownum}: missing column {code_column!r} or {label_column!r}"
                )
            label = int(rec[label_column])
            raw_lines = (rec.get(lines_column) or "").strip()
            vul_lines = []
            if label == 1 and raw_lines:
                for part in raw_lines.replace(";", ",").split(","):
                    part = part.strip()
                    if part:
                        idx = int(float(part))
                        vul_lines.append(idx + 1 if zero_based_lines else idx)
            sid = rec[id_column] if id_column and rec.get(id_column) else str(rownum - 2)
            sample = FunctionSample(
                id=sid,
                code=rec[code_column],
                label=label,
                vul_lines=frozenset(vul_lines),
                cwe=(rec.get(cwe_column) or None) if cwe_column else None,
            )
            try:
                sample.validate()
            except CorpusError as exc:
                raise CorpusError(f"row {rownum}: {exc}") from exc
            samples.append(sample)
    save_corpus(samples, out_path)
    return len(samples)


def bundled_corpus_path() -> str:
    """Path of the packaged 32-sample synthetic corpus."""
    import importlib.resources as resources

    return str(resources.files("linesift").joinpath("data/tiny_corpus.jsonl"))


_FILLER_LINES = (
    "a = a + {k} ;",
    "b = b - {k} ;",
    "int v{k} = a * b ;",
    "if ( a > {k} ) b ++ ;",
    "b = b ^ {k} ;",
    "a = a % {k} ;",
    "count += {k} ;",
)

_MARKER_LINE = "strcpy ( buf , input ) ;"


def synthesize_corpus(
    n: int = 32, seed: int = 7, vulnerable_fraction: float = 0.5
) -> list[FunctionSample]:
    """Deterministic toy corpus with planted vulnerable marker lines.

    Half the functions (by default) contain one `strcpy` call line and are
    labeled vulnerable with that line as the fine-grained ground truth; the
    rest are benign arithmetic. Separable by construction, which is what the
    overfit and staged-gating checks need.
    """
    rng = np.random.default_rng(seed)
    samples = []
    n_vul = int(round(n * vulnerable_fraction))
    for i in range(n):
        vul = i < n_vul
        body_len = int(rng.integers(5, 9))
        lines = [f"int fn{i} ( int a , int b ) {{", "char buf [ 8 ] ;"]
        for _ in range(body_len):
            template = _FILLER_LINES[int(rng.integers(0, len(_FILLER_LINES)))]
            lines.append(template.format(k=int(rng.integers(1, 60))))
        vul_lines: frozenset[int] = frozenset()
        if vul:
            pos = int(rng.integers(2, len(lines)))
            lines.insert(pos, _MARKER_LINE)
            vul_lines = frozenset({pos + 1})
        lines.append("return a ;")
        lines.append("}")
        samples.append(FunctionSample(
            id=f"syn{i:03d}",
            code="\n".join(lines),
            label=int(vul),
            vul_lines=vul_lines,
        ))
    # interleave so any prefix is label-mixed
    order = rng.permutation(n)
    return [samples[j] for j in order]
