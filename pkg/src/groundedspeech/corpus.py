"""Dataset plumbing: manifests, a deterministic synthetic corpus, activation dumps.

A manifest is a UTF-8 tab-separated file pairing utterance audio (or a
feature archive) with a transcript, an image id, the container holding the
image vector, and a train/val/test split. "#" lines are comments.

The synthetic generator builds a miniature spoken-caption corpus entirely
from one seed: every vocabulary word gets a fixed two-sinusoid audio
template (200-400 ms), utterances concatenate word templates with 50 ms
silences, and each utterance's "image" is a fixed random projection of its
bag-of-words count vector. Homonym pairs are two spellings sharing one
template and pronunciation but drawing their context words from disjoint
pools, so the acoustics alone cannot separate them.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audiofeat import SAMPLE_RATE, AudioSignal, mfcc, write_wav
from .container import container_exists_with_entry, read_container, write_container
from .seeding import substream

SPLITS = ("train", "val", "test")
SILENCE_MS = 50
WORD_MIN_MS = 200
WORD_MAX_MS = 400


class ManifestError(ValueError):
    """Malformed manifest content; message carries the line number."""


class MissingResourceError(FileNotFoundError):
    """A manifest record points at a file or entry that is not there."""


class SynthConfigError(ValueError):
    """Synthetic corpus configuration cannot be satisfied."""


@dataclass
class ManifestRecord:
    utt_id: str
    audio: str               # relative path; .wav = raw audio, .gsr = feature archive
    transcript: list
    image_id: str
    image_vec_ref: str       # relative path to the image vector container
    split: str


def save_manifest(records, path) -> None:
    lines = ["# utt_id\taudio\ttranscript\timage_id\timage_vec_ref\tsplit"]
    for r in records:
        lines.append("\t".join([r.utt_id, r.audio, " ".join(r.transcript),
                                r.image_id, r.image_vec_ref, r.split]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path, check_resources: bool = True) -> list:
    path = Path(path)
    records = []
    seen = set()
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 6:
            raise ManifestError(f"{path}:{lineno}: expected 6 tab-separated fields, got {len(parts)}")
        utt_id, audio, transcript, image_id, image_ref, split = parts
        if split not in SPLITS:
            raise ManifestError(f"{path}:{lineno}: unknown split {split!r}")
        if utt_id in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate utterance id {utt_id!r}")
        seen.add(utt_id)
        records.append(ManifestRecord(utt_id, audio, transcript.split(), image_id, image_ref, split))
    if check_resources:
        base = path.parent
        for r in records:
            target = base / r.audio
            if r.audio.endswith(".gsr"):
                if not container_exists_with_entry(target, r.utt_id):
                    raise MissingResourceError(f"feature archive {target} has no entry {r.utt_id!r}")
            elif not target.is_file():
                raise MissingResourceError(f"audio file {target} is missing")
            if not container_exists_with_entry(base / r.image_vec_ref, r.image_id):
                raise MissingResourceError(
                    f"image container {base / r.image_vec_ref} has no entry {r.image_id!r}")
    return records


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SynthConfig:
    vocab_size: int = 30
    n_homonym_pairs: int = 0
    words_per_utt: tuple = (2, 4)
    image_dim: int = 64
    noise: float = 0.01
    seed: int = 0
    n_train: int = 32
    n_val: int = 16
    n_test: int = 16
    # occurrences per homonym form (form a, form b), per pair
    homonym_counts: tuple = (25, 40)

    def __post_init__(self):
        if min(self.vocab_size, self.image_dim, self.n_train) < 1:
            raise SynthConfigError("vocab_size, image_dim and n_train must be positive")
        if self.n_val < 0 or self.n_test < 0 or self.noise < 0 or self.n_homonym_pairs < 0:
            raise SynthConfigError("counts and noise must be non-negative")
        lo, hi = self.words_per_utt
        if not 1 <= lo <= hi:
            raise SynthConfigError(f"bad words_per_utt range {self.words_per_utt}")
        if self.n_homonym_pairs:
            if self.vocab_size < 2 * self.n_homonym_pairs + 4:
                raise SynthConfigError(
                    f"vocab of {self.vocab_size} too small for {self.n_homonym_pairs} homonym pairs")
            need = self.n_homonym_pairs * sum(self.homonym_counts)
            total = self.n_train + self.n_val + self.n_test
            if need > total:
                raise SynthConfigError(
                    f"{need} homonym slots do not fit into {total} utterances")

    @property
    def n_utterances(self) -> int:
        return self.n_train + self.n_val + self.n_test


@dataclass
class SynthCorpus:
    config: SynthConfig
    records: list
    audio: dict              # utt_id -> AudioSignal
    image_vecs: dict         # image_id -> vector
    lexicon: dict            # word -> pronunciation
    word_counts: dict        # word -> occurrences in train+val transcripts
    word_audio: dict         # word -> AudioSignal of the isolated word
    homonym_pairs: list      # [(form_a, form_b)]

    def split(self, name: str) -> list:
        return [r for r in self.records if r.split == name]


def word_template(pron: str, rng) -> np.ndarray:
    """Fixed audio template for one pronunciation: two sinusoids under a
    raised-cosine envelope, 200-400 ms."""
    dur_s = rng.uniform(WORD_MIN_MS, WORD_MAX_MS) / 1000.0
    f1, f2 = rng.uniform(200.0, 3500.0, size=2)
    n = int(round(dur_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    env = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / max(n - 1, 1))
    return env * (0.5 * np.sin(2 * np.pi * f1 * t) + 0.35 * np.sin(2 * np.pi * f2 * t))


def render_utterance(words, templates: dict) -> np.ndarray:
    """Concatenate word templates with 50 ms of silence between words."""
    gap = np.zeros(SAMPLE_RATE * SILENCE_MS // 1000)
    pieces = []
    for j, w in enumerate(words):
        if j:
            pieces.append(gap)
        pieces.append(templates[w])
    return np.concatenate(pieces)


def generate_synthetic(cfg: SynthConfig) -> SynthCorpus:
    """Build the full corpus in memory; bitwise-reproducible from cfg."""
    rng = substream(cfg.seed, "synth")
    n_forms = 2 * cfg.n_homonym_pairs
    pairs = [(f"h{p}a", f"h{p}b") for p in range(cfg.n_homonym_pairs)]
    context = [f"w{i:02d}" for i in range(cfg.vocab_size - n_forms)]
    vocab = [w for pr in pairs for w in pr] + context
    vocab_index = {w: i for i, w in enumerate(vocab)}

    lexicon = {}
    for p, (a, b) in enumerate(pairs):
        lexicon[a] = lexicon[b] = f"HH{p}"
    for i, w in enumerate(context):
        lexicon[w] = f"W{i:02d}"

    # one template per distinct pronunciation, drawn in a fixed order
    templates_by_pron = {}
    for p in range(cfg.n_homonym_pairs):
        templates_by_pron[f"HH{p}"] = word_template(f"HH{p}", rng)
    for i in range(len(context)):
        templates_by_pron[f"W{i:02d}"] = word_template(f"W{i:02d}", rng)
    templates = {w: templates_by_pron[lexicon[w]] for w in vocab}

    # homonym forms occupy dedicated utterance slots; context pools are
    # disjoint between the two forms of a pair
    total = cfg.n_utterances
    form_of_slot = {}
    slot_order = list(rng.permutation(total))
    for a, b in pairs:
        for form, count in zip((a, b), cfg.homonym_counts):
            for _ in range(count):
                form_of_slot[slot_order.pop()] = form
    pool_a = context[0::2]
    pool_b = context[1::2]

    lo, hi = cfg.words_per_utt
    transcripts = []
    seen_bags = set()
    for i in range(total):
        form = form_of_slot.get(i)
        for _attempt in range(200):
            n_words = int(rng.integers(lo, hi + 1))
            if form is None:
                words = list(rng.choice(context, size=n_words, replace=True))
            else:
                pool = pool_a if form.endswith("a") else pool_b
                words = [form] + list(rng.choice(pool, size=max(n_words - 1, 1), replace=True))
                words = [words[j] for j in rng.permutation(len(words))]
            bag = tuple(sorted(words))
            if bag not in seen_bags:
                seen_bags.add(bag)
                transcripts.append(words)
                break
        else:
            raise SynthConfigError(
                "could not draw distinct utterances; enlarge vocab_size or words_per_utt")

    projection = substream(cfg.seed, "imageproj").normal(
        size=(cfg.image_dim, cfg.vocab_size)) / np.sqrt(cfg.vocab_size)

    records = []
    audio = {}
    image_vecs = {}
    splits = ["train"] * cfg.n_train + ["val"] * cfg.n_val + ["test"] * cfg.n_test
    for i, words in enumerate(transcripts):
        utt_id = f"utt{i:04d}"
        image_id = f"img{i:04d}"
        clean = render_utterance(words, templates)
        if cfg.noise > 0:
            clean = clean + cfg.noise * rng.standard_normal(clean.size)
        audio[utt_id] = AudioSignal(clean)
        counts_vec = np.zeros(cfg.vocab_size)
        for w in words:
            counts_vec[vocab_index[w]] += 1.0
        vec = projection @ counts_vec
        if cfg.noise > 0:
            vec = vec + cfg.noise * rng.standard_normal(cfg.image_dim)
        image_vecs[image_id] = vec.astype(np.float32)
        records.append(ManifestRecord(utt_id, f"wav/{utt_id}.wav", list(words),
                                      image_id, "images.gsr", splits[i]))

    word_counts = {w: 0 for w in vocab}
    for r in records:
        if r.split in ("train", "val"):
            for w in r.transcript:
                word_counts[w] += 1

    word_audio = {w: AudioSignal(templates[w].copy()) for w in vocab}
    return SynthCorpus(config=cfg, records=records, audio=audio, image_vecs=image_vecs,
                       lexicon=lexicon, word_counts=word_counts, word_audio=word_audio,
                       homonym_pairs=pairs)


def write_synthetic(corpus: SynthCorpus, out_dir) -> Path:
    """Write wavs, image vectors, manifest, lexicon and frequency table."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    (out / "words").mkdir(exist_ok=True)
    for r in corpus.records:
        write_wav(out / r.audio, corpus.audio[r.utt_id])
    for w, sig in corpus.word_audio.items():
        write_wav(out / "words" / f"{w}.wav", sig)
    write_container(out / "images.gsr", corpus.image_vecs)
    save_manifest(corpus.records, out / "manifest.tsv")
    lex_lines = [f"{w}\t{p}" for w, p in sorted(corpus.lexicon.items())]
    (out / "lexicon.tsv").write_text("\n".join(lex_lines) + "\n", encoding="utf-8")
    cnt_lines = [f"{w}\t{c}" for w, c in sorted(corpus.word_counts.items())]
    (out / "counts.tsv").write_text("\n".join(cnt_lines) + "\n", encoding="utf-8")
    return out


def load_lexicon(path) -> dict:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ManifestError(f"{path}:{lineno}: expected 'word<TAB>value'")
        out[parts[0]] = parts[1]
    return out


def load_counts(path) -> dict:
    return {w: int(v) for w, v in load_lexicon(path).items()}


# ---------------------------------------------------------------------------
# feature and activation archives


def write_features(features: dict, path) -> None:
    """Store per-utterance feature matrices, one entry per utterance id."""
    write_container(path, features)


def read_features(path) -> dict:
    return read_container(path)


def dump_activations(model, items, path) -> None:
    """Persist probe features for each (utt_id, feature_matrix) so the probes
    can run without the model. Entries: {utt}.avg_input / .layer{n} / .emb / .nsteps."""
    from .probes import extract_probe_features  # probes do not import corpus

    entries = {}
    for pf in extract_probe_features(model, items):
        entries[f"{pf.utt_id}.avg_input"] = pf.avg_input
        for n, vec in enumerate(pf.avg_layers, start=1):
            entries[f"{pf.utt_id}.layer{n}"] = vec
        entries[f"{pf.utt_id}.emb"] = pf.utt_emb
        entries[f"{pf.utt_id}.nsteps"] = np.array([float(pf.timestep_count)], dtype=np.float32)
    write_container(path, entries)


def load_activations(path) -> dict:
    """Inverse of dump_activations: utt_id -> ProbeFeatures."""
    from .probes import ProbeFeatures

    raw = read_container(path)
    grouped = {}
    for key, arr in raw.items():
        utt_id, kind = key.rsplit(".", 1)
        grouped.setdefault(utt_id, {})[kind] = arr
    out = {}
    for utt_id, parts in sorted(grouped.items()):
        layers = [parts[k] for k in sorted((k for k in parts if k.startswith("layer")),
                                           key=lambda k: int(k[5:]))]
        out[utt_id] = ProbeFeatures(
            utt_id=utt_id,
            avg_input=parts["avg_input"],
            avg_layers=layers,
            utt_emb=parts["emb"],
            timestep_count=int(parts["nsteps"][0]))
    return out


def featurize_records(records, base_dir, with_deltas: bool = False) -> dict:
    """MFCC features for every manifest record with wav audio."""
    from .audiofeat import add_deltas, read_wav, truncate

    feats = {}
    for r in records:
        sig = read_wav(Path(base_dir) / r.audio)
        fm = mfcc(truncate(sig, 10_000))
        if with_deltas:
            fm = add_deltas(fm)
        feats[r.utt_id] = fm.frames
    return feats
