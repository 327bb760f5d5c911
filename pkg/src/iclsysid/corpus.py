"""Synthetic pretraining corpus: generation, persistence, and iteration.

File layout (one directory per corpus):

* ``corpus.bin`` — magic ``ICLSYS01``, u32 format version, u64 n_systems,
  u32 pairs_per_system, u64 signal length; then one block per system in
  system_id order: u8 split tag, system spec record, and per pair a kind tag,
  kind parameters, and the x / y signals (see :mod:`iclsysid.signals` for the
  signal wire format).
* ``manifest.json`` — counts, seeds, PRNG name, and a SHA-256 content hash
  over every byte after the fixed header.

Splits are assigned per system, never per pair, so train/test systems are
disjoint. Every system is generated from a seed derived from
(global seed, system_id), which makes generation order — and thread count —
irrelevant to the output bytes.

System specs are persisted for inspection and evaluation, but the record
stream consumed by training carries only (system_id, pair_index, kind, x, y,
split).
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import CorpusCorruptionError, ParameterError
from .seeding import PRNG_NAME, derive_seed, rng_from_seed
from .signals import (
    Chirp,
    FilteredNoise,
    KINDS_BY_NAME,
    Multisine,
    Ramp,
    Signal,
    SignalKind,
    SquarePrbs,
    Step,
    generate,
    kind_name,
    normalize,
    read_signal,
    write_signal,
)
from .systems import (
    LtiSamplingConfig,
    NtiSamplingConfig,
    SystemSpec,
    read_system_spec,
    sample_lti,
    sample_nti,
    simulate,
    write_system_spec,
)

GENERATOR_VERSION = "1.0.0"
_MAGIC = b"ICLSYS01"
_FORMAT_VERSION = 1

KIND_ORDER = ("step", "ramp", "chirp", "multisine", "square_prbs", "filtered_noise")
_KIND_TAGS = {name: i + 1 for i, name in enumerate(KIND_ORDER)}
_TAG_KINDS = {tag: name for name, tag in _KIND_TAGS.items()}

SPLIT_TRAIN, SPLIT_TEST = "train", "test"
_SPLIT_TAGS = {SPLIT_TRAIN: 0, SPLIT_TEST: 1}
_TAG_SPLITS = {0: SPLIT_TRAIN, 1: SPLIT_TEST}


@dataclass(frozen=True)
class CorpusConfig:
    n_systems: int = 2000
    pairs_per_system: int = 3
    length: int = 2048
    lti_fraction: float = 0.5
    train_fraction: float = 0.9
    lti: LtiSamplingConfig = field(default_factory=LtiSamplingConfig)
    nti: NtiSamplingConfig = field(default_factory=NtiSamplingConfig)

    def __post_init__(self):
        if self.n_systems < 2:
            raise ParameterError("n_systems must be >= 2")
        if not 1 <= self.pairs_per_system <= len(KIND_ORDER):
            raise ParameterError(
                f"pairs_per_system must be in [1, {len(KIND_ORDER)}] "
                f"(kinds are drawn without replacement), got {self.pairs_per_system}"
            )
        if self.length < 2:
            raise ParameterError("length must be >= 2")
        if not 0.0 <= self.lti_fraction <= 1.0:
            raise ParameterError("lti_fraction must lie in [0, 1]")
        if not 0.0 < self.train_fraction < 1.0:
            raise ParameterError("train_fraction must lie in (0, 1)")

    @classmethod
    def paper_scale(cls) -> "CorpusConfig":
        return cls(n_systems=20_000, pairs_per_system=3, length=16_384)


@dataclass(frozen=True)
class CorpusRecord:
    system_id: int
    pair_index: int
    kind: SignalKind
    x: Signal
    y: Signal
    split: str


@dataclass(frozen=True)
class CorpusManifest:
    generator_version: str
    seed: int
    prng: str
    length: int
    n_systems: int
    pairs_per_system: int
    n_lti: int
    n_nti: int
    train_systems: int
    test_systems: int
    content_sha256: str
    config: dict

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CorpusManifest":
        return cls(**json.loads(text))


# --- per-pair kind randomization -------------------------------------------


def sample_kind(name: str, rng: np.random.Generator, length: int) -> SignalKind:
    """Draw randomized parameters for one excitation kind."""
    if name == "step":
        return Step(amplitude=1.0, onset=int(rng.integers(0, max(1, length // 4))))
    if name == "ramp":
        sign = 1.0 if rng.random() < 0.5 else -1.0
        return Ramp(start=float(rng.uniform(-0.25, 0.25)), stop=sign)
    if name == "chirp":
        f0 = float(np.exp(rng.uniform(np.log(5e-4), np.log(0.02))))
        f1 = float(np.exp(rng.uniform(np.log(2 * f0), np.log(0.2))))
        return Chirp(f0=f0, f1=f1)
    if name == "multisine":
        n_h = int(rng.integers(3, 13))
        fb = float(np.exp(rng.uniform(np.log(1e-3), np.log(0.4 / n_h))))
        return Multisine(n_harmonics=n_h, base_freq=fb)
    if name == "square_prbs":
        return SquarePrbs(bit_period=int(rng.integers(32, 257)))
    if name == "filtered_noise":
        return FilteredNoise(bandwidth=float(np.exp(rng.uniform(np.log(5e-3), np.log(0.15)))))
    raise ParameterError(f"unknown kind name {name!r}")


# --- generation -------------------------------------------------------------


def _assignments(config: CorpusConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-system (is_lti, is_train) flags with exact fractions, shuffled."""
    n = config.n_systems
    n_lti = round(n * config.lti_fraction)
    is_lti = np.zeros(n, dtype=bool)
    is_lti[:n_lti] = True
    rng_from_seed(derive_seed(seed, "family")).shuffle(is_lti)
    n_train = round(n * config.train_fraction)
    is_train = np.zeros(n, dtype=bool)
    is_train[:n_train] = True
    rng_from_seed(derive_seed(seed, "split")).shuffle(is_train)
    return is_lti, is_train


def _generate_system_block(
    config: CorpusConfig, seed: int, system_id: int, lti: bool, train: bool
) -> bytes:
    sys_seed = derive_seed(seed, system_id, "system")
    if lti:
        spec = SystemSpec(system_id, sys_seed, sample_lti(sys_seed, config.lti))
    else:
        spec = SystemSpec(system_id, sys_seed, sample_nti(sys_seed, config.nti))
    rng = rng_from_seed(derive_seed(sys_seed, "pairs"))
    kind_names = list(rng.permutation(KIND_ORDER)[: config.pairs_per_system])

    buf = io.BytesIO()
    buf.write(struct.pack("<B", _SPLIT_TAGS[SPLIT_TRAIN if train else SPLIT_TEST]))
    write_system_spec(buf, spec)
    for pair_index, name in enumerate(kind_names):
        kind = sample_kind(name, rng, config.length)
        x = generate(kind, config.length, derive_seed(sys_seed, pair_index, "x"))
        y = normalize(simulate(spec, x))
        buf.write(struct.pack("<B", _KIND_TAGS[name]))
        _write_kind(buf, kind)
        write_signal(buf, x)
        write_signal(buf, y)
    return buf.getvalue()


def build_corpus(
    config: CorpusConfig, seed: int, out_dir: str | Path, n_jobs: int = 1
) -> CorpusManifest:
    """Generate a corpus directory (``corpus.bin`` + ``manifest.json``).

    The output bytes are a pure function of (config, seed); ``n_jobs`` only
    parallelizes per-system work.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    is_lti, is_train = _assignments(config, seed)

    args = [
        (config, seed, i, bool(is_lti[i]), bool(is_train[i]))
        for i in range(config.n_systems)
    ]
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            blocks = list(pool.map(lambda a: _generate_system_block(*a), args))
    else:
        blocks = [_generate_system_block(*a) for a in args]

    header = _MAGIC + struct.pack(
        "<IQIQ", _FORMAT_VERSION, config.n_systems, config.pairs_per_system, config.length
    )
    digest = hashlib.sha256()
    with open(out_dir / "corpus.bin", "wb") as fp:
        fp.write(header)
        for block in blocks:
            digest.update(block)
            fp.write(block)

    manifest = CorpusManifest(
        generator_version=GENERATOR_VERSION,
        seed=seed,
        prng=PRNG_NAME,
        length=config.length,
        n_systems=config.n_systems,
        pairs_per_system=config.pairs_per_system,
        n_lti=int(is_lti.sum()),
        n_nti=int((~is_lti).sum()),
        train_systems=int(is_train.sum()),
        test_systems=int((~is_train).sum()),
        content_sha256=digest.hexdigest(),
        config=_config_dict(config),
    )
    (out_dir / "manifest.json").write_text(manifest.to_json())
    return manifest


def _config_dict(config: CorpusConfig) -> dict:
    def scrub(value):
        if isinstance(value, dict):
            return {k: scrub(v) for k, v in value.items()}
        if isinstance(value, (list, tuple)):
            return [scrub(v) for v in value]
        if isinstance(value, np.generic):
            return value.item()
        return value

    return scrub(dataclasses.asdict(config))


def _write_kind(fp, kind: SignalKind) -> None:
    if isinstance(kind, Step):
        fp.write(struct.pack("<dQ", kind.amplitude, kind.onset))
    elif isinstance(kind, Ramp):
        fp.write(struct.pack("<2d", kind.start, kind.stop))
    elif isinstance(kind, Chirp):
        fp.write(struct.pack("<3d", kind.f0, kind.f1, kind.amplitude))
    elif isinstance(kind, Multisine):
        fp.write(struct.pack("<Qd", kind.n_harmonics, kind.base_freq))
    elif isinstance(kind, SquarePrbs):
        fp.write(struct.pack("<Qd", kind.bit_period, kind.amplitude))
    else:
        fp.write(struct.pack("<d", kind.bandwidth))


def _read_kind(fp, name: str) -> SignalKind:
    if name == "step":
        amplitude, onset = struct.unpack("<dQ", fp.read(16))
        return Step(amplitude, int(onset))
    if name == "ramp":
        return Ramp(*struct.unpack("<2d", fp.read(16)))
    if name == "chirp":
        return Chirp(*struct.unpack("<3d", fp.read(24)))
    if name == "multisine":
        n_h, fb = struct.unpack("<Qd", fp.read(16))
        return Multisine(int(n_h), fb)
    if name == "square_prbs":
        period, amplitude = struct.unpack("<Qd", fp.read(16))
        return SquarePrbs(int(period), amplitude)
    return FilteredNoise(*struct.unpack("<d", fp.read(8)))


# --- reading ----------------------------------------------------------------


class CorpusReader:
    """Loads a corpus directory, verifies its content hash, and serves records.

    Training code should only touch :meth:`records`, :meth:`iterate`, and
    :meth:`sample_contrastive_batch`; :attr:`system_specs` exists for
    evaluation and inspection only.
    """

    def __init__(self, corpus_dir: str | Path):
        corpus_dir = Path(corpus_dir)
        manifest_path = corpus_dir / "manifest.json"
        bin_path = corpus_dir / "corpus.bin"
        if not manifest_path.exists() or not bin_path.exists():
            raise CorpusCorruptionError(f"missing corpus files in {corpus_dir}")
        self.manifest = CorpusManifest.from_json(manifest_path.read_text())
        raw = bin_path.read_bytes()
        if raw[: len(_MAGIC)] != _MAGIC:
            raise CorpusCorruptionError("bad corpus magic")
        header_len = len(_MAGIC) + struct.calcsize("<IQIQ")
        version, n_systems, pairs, length = struct.unpack(
            "<IQIQ", raw[len(_MAGIC) : header_len]
        )
        if version != _FORMAT_VERSION:
            raise CorpusCorruptionError(f"unsupported corpus format version {version}")
        body = raw[header_len:]
        digest = hashlib.sha256(body).hexdigest()
        if digest != self.manifest.content_sha256:
            raise CorpusCorruptionError(
                "corpus content hash mismatch: file does not match manifest"
            )
        if (n_systems, pairs, length) != (
            self.manifest.n_systems,
            self.manifest.pairs_per_system,
            self.manifest.length,
        ):
            raise CorpusCorruptionError("corpus header disagrees with manifest")

        self._records: list[CorpusRecord] = []
        self._specs: list[SystemSpec] = []
        fp = io.BytesIO(body)
        for _ in range(n_systems):
            (split_tag,) = struct.unpack("<B", fp.read(1))
            split = _TAG_SPLITS[split_tag]
            spec = read_system_spec(fp)
            self._specs.append(spec)
            for pair_index in range(pairs):
                (kind_tag,) = struct.unpack("<B", fp.read(1))
                kind = _read_kind(fp, _TAG_KINDS[kind_tag])
                x = read_signal(fp)
                y = read_signal(fp)
                self._records.append(
                    CorpusRecord(spec.system_id, pair_index, kind, x, y, split)
                )
        if fp.read(1):
            raise CorpusCorruptionError("trailing bytes after final record")
        self._by_split = {
            split: [r for r in self._records if r.split == split]
            for split in (SPLIT_TRAIN, SPLIT_TEST)
        }

    # -- record access -------------------------------------------------------

    @property
    def length(self) -> int:
        return self.manifest.length

    @property
    def pairs_per_system(self) -> int:
        return self.manifest.pairs_per_system

    def records(self, split: str) -> list[CorpusRecord]:
        self._check_split(split)
        return list(self._by_split[split])

    def system_ids(self, split: str) -> list[int]:
        self._check_split(split)
        return sorted({r.system_id for r in self._by_split[split]})

    def iterate(self, split: str, shuffle_seed: int | None = None) -> Iterator[CorpusRecord]:
        """Yield every record of the split exactly once, in a seeded order."""
        recs = self.records(split)
        if shuffle_seed is not None:
            order = rng_from_seed(shuffle_seed).permutation(len(recs))
            recs = [recs[i] for i in order]
        yield from recs

    def sample_contrastive_batch(
        self, split: str, batch_systems: int, seed: int
    ) -> list[tuple[CorpusRecord, CorpusRecord]]:
        """Draw ``batch_systems`` distinct systems, two distinct pairs each."""
        if batch_systems < 2:
            raise ParameterError("batch_systems must be >= 2")
        if self.pairs_per_system < 2:
            raise ParameterError("corpus needs pairs_per_system >= 2 for contrastive batches")
        ids = self.system_ids(split)
        if batch_systems > len(ids):
            raise ParameterError(
                f"batch_systems={batch_systems} exceeds the {len(ids)} systems in {split!r}"
            )
        rng = rng_from_seed(seed)
        chosen = rng.choice(len(ids), size=batch_systems, replace=False)
        by_system = {}
        for r in self._by_split[split]:
            by_system.setdefault(r.system_id, []).append(r)
        batch = []
        for idx in chosen:
            recs = sorted(by_system[ids[idx]], key=lambda r: r.pair_index)
            p1, p2 = rng.choice(len(recs), size=2, replace=False)
            batch.append((recs[p1], recs[p2]))
        return batch

    # -- evaluation-only access ----------------------------------------------

    @property
    def system_specs(self) -> dict[int, SystemSpec]:
        """System metadata, for evaluation/inspection only — never training."""
        return {s.system_id: s for s in self._specs}

    # -- helpers ---------------------------------------------------------------

    def signal_matrix(self, split: str) -> np.ndarray:
        """All x and y sample rows of a split as one float32 matrix."""
        recs = self.records(split)
        out = np.empty((2 * len(recs), self.length), dtype=np.float32)
        for i, r in enumerate(recs):
            out[2 * i] = r.x.samples
            out[2 * i + 1] = r.y.samples
        return out

    def _check_split(self, split: str) -> None:
        if split not in (SPLIT_TRAIN, SPLIT_TEST):
            raise ParameterError(f"split must be 'train' or 'test', got {split!r}")
