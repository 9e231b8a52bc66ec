"""Synthetic multi-domain corpora of few-shot tasks, plus task file I/O.

Each domain is a set of Gaussian class clusters: class means are drawn
once from the domain's seeded generator around a domain centre, and
samples are drawn i.i.d. around their class mean.  Tasks are N-way
K-shot draws from one domain.  Every byte of a corpus is reproducible
from its manifest (domain specs, seeds, counts).

On disk a corpus is a JSON-lines task file plus a JSON manifest
side-car, or a single binary file (magic "OTTC") mirroring the
checkpoint blob layout for large corpora.  Any external tool can feed
the pipeline by emitting the JSONL format.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .graphs import Task

__all__ = [
    "DomainSpec",
    "DomainSampler",
    "Corpus",
    "CorpusFormatError",
    "gen_domain",
    "sample_task",
    "build_corpus",
    "default_domain_specs",
    "samplers_from_manifest",
    "write_corpus",
    "read_corpus",
]

MANIFEST_VERSION = 1
CORPUS_MAGIC = b"OTTC"
CORPUS_BINARY_VERSION = 1


class CorpusFormatError(ValueError):
    """Raised when a corpus file cannot be parsed."""


@dataclass(frozen=True)
class DomainSpec:
    """Recipe for one synthetic domain of Gaussian class clusters."""

    domain_tag: str
    n_classes: int
    dim: int
    seed: int
    mean_scale: float = 2.0
    noise_scale: float = 0.5
    center_scale: float = 6.0
    class_id_offset: int = 0

    def __post_init__(self):
        if self.n_classes < 1 or self.dim < 1:
            raise ValueError("n_classes and dim must be positive")
        if self.mean_scale < 0 or self.noise_scale < 0 or self.center_scale < 0:
            raise ValueError("scales must be nonnegative")


class DomainSampler:
    """Class-conditional generator for one domain.

    Class means are fixed at construction (one draw per domain seed);
    sample() then draws i.i.d. Gaussians around the requested class
    mean using the caller's generator, so identical call sequences give
    identical samples.
    """

    def __init__(self, spec: DomainSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        center = rng.normal(scale=spec.center_scale, size=spec.dim)
        self.class_means = center + rng.normal(
            scale=spec.mean_scale, size=(spec.n_classes, spec.dim)
        )

    @property
    def class_ids(self) -> np.ndarray:
        """Global class ids this domain owns."""
        return np.arange(self.spec.n_classes) + self.spec.class_id_offset

    def local_class(self, class_id: int) -> int:
        local = class_id - self.spec.class_id_offset
        if not 0 <= local < self.spec.n_classes:
            raise ValueError(f"class id {class_id} not in domain {self.spec.domain_tag}")
        return local

    def sample(self, class_id: int, count: int, rng: np.random.Generator) -> np.ndarray:
        mean = self.class_means[self.local_class(class_id)]
        return mean + self.spec.noise_scale * rng.standard_normal((count, self.spec.dim))


def gen_domain(spec: DomainSpec) -> DomainSampler:
    """Materialise the class-conditional generator for a domain spec."""
    return DomainSampler(spec)


def sample_task(
    sampler: DomainSampler, n_way: int, k_shot: int, task_id: int, seed: int
) -> Task:
    """Draw one N-way K-shot task from a domain, deterministic per seed.

    Labels 0..n_way-1 are assigned in ascending global class id order,
    so tasks over the same class subset agree on their labelling.
    """
    if n_way > sampler.spec.n_classes:
        raise ValueError(
            f"n_way {n_way} exceeds the domain's {sampler.spec.n_classes} classes"
        )
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(sampler.class_ids, size=n_way, replace=False))
    features = np.vstack([sampler.sample(c, k_shot, rng) for c in chosen])
    labels = np.repeat(np.arange(n_way), k_shot)
    return Task(
        task_id=task_id,
        n_way=n_way,
        k_shot=k_shot,
        features=features,
        labels=labels,
        domain_tag=sampler.spec.domain_tag,
        class_ids=tuple(int(c) for c in chosen),
    )


@dataclass
class Corpus:
    """A list of tasks plus the manifest that regenerates them."""

    tasks: list[Task]
    manifest: dict

    def __post_init__(self):
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ValueError("task ids must be unique within a corpus")

    def by_id(self, task_id: int) -> Task:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise KeyError(f"no task with id {task_id}")


def default_domain_specs(
    n_domains: int = 3,
    n_classes: int = 20,
    dim: int = 16,
    seed: int = 0,
    mean_scale: float = 2.0,
    noise_scale: float = 0.5,
    center_scale: float = 6.0,
) -> list[DomainSpec]:
    """Domain recipes with disjoint global class id ranges."""
    return [
        DomainSpec(
            domain_tag=f"domain{i}",
            n_classes=n_classes,
            dim=dim,
            seed=seed * 1000 + i,
            mean_scale=mean_scale,
            noise_scale=noise_scale,
            center_scale=center_scale,
            class_id_offset=i * n_classes,
        )
        for i in range(n_domains)
    ]


def build_corpus(
    specs: list[DomainSpec],
    n_tasks: int,
    n_way: int = 5,
    k_shot: int = 2,
    seed: int = 0,
) -> Corpus:
    """Sample a corpus, tasks assigned round-robin across domains."""
    if not specs:
        raise ValueError("need at least one domain spec")
    samplers = [gen_domain(s) for s in specs]
    rng = np.random.default_rng(seed)
    tasks = []
    for task_id in range(n_tasks):
        sampler = samplers[task_id % len(samplers)]
        task_seed = int(rng.integers(0, 2**63 - 1))
        tasks.append(sample_task(sampler, n_way, k_shot, task_id, task_seed))
    manifest = {
        "format_version": MANIFEST_VERSION,
        "seed": seed,
        "n_tasks": n_tasks,
        "n_way": n_way,
        "k_shot": k_shot,
        "domains": [asdict(s) for s in specs],
    }
    return Corpus(tasks=tasks, manifest=manifest)


def corpus_from_manifest(manifest: dict) -> Corpus:
    """Regenerate a corpus byte-for-byte from its manifest."""
    specs = [DomainSpec(**d) for d in manifest["domains"]]
    return build_corpus(
        specs,
        n_tasks=manifest["n_tasks"],
        n_way=manifest["n_way"],
        k_shot=manifest["k_shot"],
        seed=manifest["seed"],
    )


def samplers_from_manifest(manifest: dict) -> dict[str, DomainSampler]:
    """Domain samplers keyed by domain tag, for query-set generation."""
    return {
        d["domain_tag"]: gen_domain(DomainSpec(**d)) for d in manifest["domains"]
    }


def _task_to_record(task: Task) -> dict:
    return {
        "task_id": task.task_id,
        "n_way": task.n_way,
        "k_shot": task.k_shot,
        "domain_tag": task.domain_tag,
        "class_ids": list(task.class_ids) if task.class_ids is not None else None,
        "labels": task.labels.tolist(),
        "features": task.features.tolist(),
    }


def _task_from_record(rec: dict) -> Task:
    return Task(
        task_id=rec["task_id"],
        n_way=rec["n_way"],
        k_shot=rec["k_shot"],
        features=np.array(rec["features"], dtype=np.float64),
        labels=np.array(rec["labels"], dtype=np.int64),
        domain_tag=rec.get("domain_tag"),
        class_ids=tuple(rec["class_ids"]) if rec.get("class_ids") else None,
    )


def _manifest_path(path: Path) -> Path:
    return path.with_suffix(".manifest.json")


def write_corpus(corpus: Corpus, path, binary: bool = False) -> None:
    """Write a corpus to disk.

    JSONL mode writes one task per line plus a `.manifest.json`
    side-car; binary mode writes a single self-contained blob.  Float
    round-trips are bit-exact in both formats.
    """
    path = Path(path)
    if binary:
        _write_corpus_binary(corpus, path)
        return
    with open(path, "w") as fh:
        for task in corpus.tasks:
            fh.write(json.dumps(_task_to_record(task)) + "\n")
    with open(_manifest_path(path), "w") as fh:
        json.dump(corpus.manifest, fh, indent=2)
        fh.write("\n")


def read_corpus(path) -> Corpus:
    """Read a corpus written by write_corpus (either format)."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == CORPUS_MAGIC:
        return _read_corpus_binary(path)
    return _read_corpus_jsonl(path)


def _read_corpus_jsonl(path: Path) -> Corpus:
    tasks = []
    offset = 0
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.decode("utf-8").strip()
            if line:
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise CorpusFormatError(
                        f"{path}: malformed task record on line {lineno} "
                        f"(byte offset {offset + exc.pos}): {exc.msg}"
                    ) from exc
                try:
                    tasks.append(_task_from_record(rec))
                except (KeyError, TypeError, ValueError) as exc:
                    raise CorpusFormatError(
                        f"{path}: invalid task on line {lineno}: {exc}"
                    ) from exc
            offset += len(raw)
    manifest_path = _manifest_path(path)
    if not manifest_path.exists():
        raise CorpusFormatError(f"missing manifest file {manifest_path}")
    with open(manifest_path) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(
                f"{manifest_path}: malformed manifest at byte {exc.pos}: {exc.msg}"
            ) from exc
    version = manifest.get("format_version")
    if version != MANIFEST_VERSION:
        raise CorpusFormatError(
            f"unsupported manifest version {version}, expected {MANIFEST_VERSION}"
        )
    return Corpus(tasks=tasks, manifest=manifest)


def _write_corpus_binary(corpus: Corpus, path: Path) -> None:
    manifest_blob = json.dumps(corpus.manifest).encode("utf-8")
    chunks = [
        CORPUS_MAGIC,
        struct.pack("<II", CORPUS_BINARY_VERSION, len(corpus.tasks)),
        struct.pack("<I", len(manifest_blob)),
        manifest_blob,
    ]
    for task in corpus.tasks:
        tag = (task.domain_tag or "").encode("utf-8")
        class_ids = task.class_ids or ()
        chunks.append(
            struct.pack(
                "<qIIIHH",
                task.task_id,
                task.n_way,
                task.k_shot,
                task.features.shape[1],
                len(tag),
                len(class_ids),
            )
        )
        chunks.append(tag)
        chunks.append(np.asarray(class_ids, dtype="<i8").tobytes())
        chunks.append(np.ascontiguousarray(task.labels, dtype="<i8").tobytes())
        chunks.append(np.ascontiguousarray(task.features, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def _read_corpus_binary(path: Path) -> Corpus:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CORPUS_MAGIC:
        raise CorpusFormatError(f"{path}: bad magic bytes")
    off = 4

    def take(fmt):
        nonlocal off
        try:
            vals = struct.unpack_from(fmt, blob, off)
        except struct.error as exc:
            raise CorpusFormatError(f"{path}: truncated at byte {off}: {exc}") from exc
        off += struct.calcsize(fmt)
        return vals

    version, n_tasks = take("<II")
    if version != CORPUS_BINARY_VERSION:
        raise CorpusFormatError(
            f"unsupported corpus version {version}, expected {CORPUS_BINARY_VERSION}"
        )
    (manifest_len,) = take("<I")
    if off + manifest_len > len(blob):
        raise CorpusFormatError(f"{path}: truncated manifest at byte {off}")
    try:
        manifest = json.loads(blob[off : off + manifest_len])
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(
            f"{path}: malformed embedded manifest at byte {off + exc.pos}"
        ) from exc
    off += manifest_len

    def take_bytes(count):
        nonlocal off
        if off + count > len(blob):
            raise CorpusFormatError(
                f"{path}: truncated at byte {off}, need {count} more bytes"
            )
        out = blob[off : off + count]
        off += count
        return out

    tasks = []
    for _ in range(n_tasks):
        task_id, n_way, k_shot, dim, tag_len, n_class_ids = take("<qIIIHH")
        tag = take_bytes(tag_len).decode("utf-8") or None
        class_ids = np.frombuffer(take_bytes(8 * n_class_ids), dtype="<i8")
        n_samples = n_way * k_shot
        labels = np.frombuffer(take_bytes(8 * n_samples), dtype="<i8")
        features = np.frombuffer(take_bytes(8 * n_samples * dim), dtype="<f8")
        tasks.append(
            Task(
                task_id=task_id,
                n_way=n_way,
                k_shot=k_shot,
                features=features.reshape(n_samples, dim).copy(),
                labels=labels.copy(),
                domain_tag=tag,
                class_ids=tuple(int(c) for c in class_ids) if n_class_ids else None,
            )
        )
    if off != len(blob):
        raise CorpusFormatError(f"{path}: {len(blob) - off} trailing bytes")
    return Corpus(tasks=tasks, manifest=manifest)
