"""Command-line pipeline: synth, featurize, train, evaluate, dump-activations, probe.

Configuration precedence is built-in preset < "key = value" config file <
command-line flag; unknown config keys are rejected and every effective
value is echoed to the run log, so a run can be reproduced from its log
alone. All randomness derives from --seed through named substreams.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import corpus as C
from . import evaluation as E
from . import numcore as nc
from . import probes as P
from . import training as T
from .container import read_container
from .model import PRESETS, SpeechModel, TextModel
from .numcore import Tensor

# every settable key: name -> (type, default). Paths default to None and
# usually come from flags; the rest mirror the retrieval presets.
SCHEMA = {
    "preset": (str, "coco-speech"),
    "seed": (int, 0),
    "margin": (float, 0.2),
    "lr": (float, None),            # None -> preset default
    "batch": (int, 32),
    "epochs": (int, 25),
    "stop_loss": (float, None),
    "deltas": (bool, False),
    "split": (str, "val"),
    "task": (str, "all"),
    "manifest": (str, None),
    "features": (str, None),
    "checkpoint": (str, None),
    "activations": (str, None),
    "out": (str, None),
    "pairs": (str, None),
    "lexicon": (str, None),
    "counts": (str, None),
    "words_dir": (str, None),
    "text_checkpoint": (str, None),
    "text_preset": (str, "coco-text"),
    # synthetic corpus keys
    "vocab_size": (int, 30),
    "homonym_pairs": (int, 0),
    "words_min": (int, 2),
    "words_max": (int, 4),
    "image_dim": (int, 64),
    "noise": (float, 0.01),
    "n_train": (int, 32),
    "n_val": (int, 16),
    "n_test": (int, 16),
    "homonym_count_a": (int, 25),
    "homonym_count_b": (int, 40),
}


class CliError(ValueError):
    pass


def _coerce(key: str, raw: str):
    typ, _ = SCHEMA[key]
    if typ is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise CliError(f"config key {key!r}: cannot read {raw!r} as a boolean")
    try:
        return typ(raw)
    except ValueError as exc:
        raise CliError(f"config key {key!r}: {exc}") from exc


def parse_config_file(path) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise CliError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, value.strip())
    return values


def effective_config(args: argparse.Namespace) -> dict:
    cfg = {k: default for k, (_, default) in SCHEMA.items()}
    if getattr(args, "config", None):
        cfg.update(parse_config_file(args.config))
    for key in SCHEMA:
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = flag
    return cfg


def write_run_log(target: Path, cfg: dict, lines=()) -> None:
    target.parent.mkdir(parents=True, exist_ok=True)
    body = [f"{k} = {cfg[k]}" for k in sorted(cfg)]
    body.extend(lines)
    target.write_text("\n".join(body) + "\n", encoding="utf-8")


def _require(cfg: dict, *keys):
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise CliError(f"missing required option(s): {', '.join('--' + k.replace('_', '-') for k in missing)}")


def _model_config(cfg: dict):
    name = cfg["preset"]
    if name not in PRESETS:
        raise CliError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]


def _load_image_vectors(records, base: Path) -> dict:
    vecs = {}
    containers = {}
    for r in records:
        ref = r.image_vec_ref
        if ref not in containers:
            containers[ref] = read_container(base / ref)
        vecs[r.image_id] = containers[ref][r.image_id]
    return vecs


def _build_vocab(records) -> list:
    words = sorted({w for r in records for w in r.transcript})
    return ["<unk>"] + words


def _token_ids(transcript, vocab_index) -> np.ndarray:
    ids = [vocab_index.get(w, 0) for w in transcript]
    return np.asarray(ids if ids else [0], dtype=np.intp)


def _examples(records, cfg, base: Path, features=None, vocab_index=None):
    image_vecs = _load_image_vectors(records, base)
    out = []
    for r in records:
        if vocab_index is None:
            utt_input = features[r.utt_id]
        else:
            utt_input = _token_ids(r.transcript, vocab_index)
        out.append(T.PairedExample(r.utt_id, utt_input, r.image_id, image_vecs[r.image_id]))
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: dict) -> int:
    _require(cfg, "out")
    synth_cfg = C.SynthConfig(
        vocab_size=cfg["vocab_size"], n_homonym_pairs=cfg["homonym_pairs"],
        words_per_utt=(cfg["words_min"], cfg["words_max"]), image_dim=cfg["image_dim"],
        noise=cfg["noise"], seed=cfg["seed"], n_train=cfg["n_train"],
        n_val=cfg["n_val"], n_test=cfg["n_test"],
        homonym_counts=(cfg["homonym_count_a"], cfg["homonym_count_b"]))
    corpus = C.generate_synthetic(synth_cfg)
    out = C.write_synthetic(corpus, cfg["out"])
    write_run_log(out / "run.log", cfg, [f"utterances = {len(corpus.records)}"])
    print(f"wrote {len(corpus.records)} utterances to {out}")
    return 0


def cmd_featurize(cfg: dict) -> int:
    _require(cfg, "manifest", "out")
    manifest = Path(cfg["manifest"])
    records = C.load_manifest(manifest)
    feats = C.featurize_records(records, manifest.parent, with_deltas=cfg["deltas"])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    C.write_features(feats, out)
    write_run_log(out.with_suffix(out.suffix + ".log"), cfg, [f"utterances = {len(feats)}"])
    print(f"wrote features for {len(feats)} utterances to {out}")
    return 0


def _load_model(cfg: dict, checkpoint_key: str = "checkpoint", preset_key: str = "preset"):
    name = cfg[preset_key]
    if name not in PRESETS:
        raise CliError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    model_cfg = PRESETS[name]
    path = Path(cfg[checkpoint_key])
    if model_cfg.kind == "text":
        vocab_path = path.parent / "vocab.txt"
        vocab = vocab_path.read_text(encoding="utf-8").splitlines()
        model_cfg = model_cfg.with_vocab(len(vocab))
        model = TextModel.load(path, model_cfg)
        return model, {w: i for i, w in enumerate(vocab)}
    return SpeechModel.load(path, model_cfg), None


def cmd_train(cfg: dict) -> int:
    _require(cfg, "manifest", "out")
    model_cfg = _model_config(cfg)
    manifest = Path(cfg["manifest"])
    records = C.load_manifest(manifest)
    train_recs = [r for r in records if r.split == "train"]
    val_recs = [r for r in records if r.split == "val"]
    notes = []
    if not train_recs:
        raise T.TrainingConfigError("manifest has no train records")
    if not val_recs:
        val_recs = train_recs
        notes.append("note = empty val split, validating on train records")

    vocab_index = None
    if model_cfg.kind == "text":
        vocab = _build_vocab(train_recs + val_recs)
        model_cfg = model_cfg.with_vocab(len(vocab))
        vocab_index = {w: i for i, w in enumerate(vocab)}
        model = TextModel.init(model_cfg, cfg["seed"])
        features = None
    else:
        _require(cfg, "features")
        features = C.read_features(cfg["features"])
        dims = {features[r.utt_id].shape[1] for r in train_recs}
        if dims != {model_cfg.input_dim}:
            raise CliError(f"feature dim {sorted(dims)} does not match preset input dim "
                           f"{model_cfg.input_dim}; check the featurize --deltas setting")
        model = SpeechModel.init(model_cfg, cfg["seed"])

    train_ex = _examples(train_recs, cfg, manifest.parent, features, vocab_index)
    val_ex = _examples(val_recs, cfg, manifest.parent, features, vocab_index)
    lr = cfg["lr"] if cfg["lr"] is not None else T.DEFAULT_LR[model_cfg.kind]
    train_cfg = T.TrainConfig(lr=lr, batch_size=cfg["batch"], max_epochs=cfg["epochs"],
                              seed=cfg["seed"], margin=cfg["margin"], stop_loss=cfg["stop_loss"])
    result = T.fit(model, train_ex, val_ex, train_cfg)

    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    best = type(model)(model.config, {k: Tensor(v, requires_grad=True)
                                      for k, v in result.best_params.items()})
    best.save(out / "checkpoint.gsr")
    model.save(out / "checkpoint_final.gsr")  # last-epoch parameters
    (out / "train_log.csv").write_text(T.format_training_log(result.log), encoding="utf-8")
    if vocab_index is not None:
        (out / "vocab.txt").write_text("\n".join(sorted(vocab_index, key=vocab_index.get)) + "\n",
                                       encoding="utf-8")
    write_run_log(out / "run.log", cfg, notes + [f"best_epoch = {result.best_epoch}",
                                                 f"epochs_run = {len(result.log)}"])
    print(f"trained {len(result.log)} epochs; best epoch {result.best_epoch}; wrote {out}")
    return 0


def cmd_evaluate(cfg: dict) -> int:
    _require(cfg, "manifest", "checkpoint", "out")
    manifest = Path(cfg["manifest"])
    records = [r for r in C.load_manifest(manifest) if r.split == cfg["split"]]
    if not records:
        raise CliError(f"no records in split {cfg['split']!r}")
    model, vocab_index = _load_model(cfg)
    features = None
    if vocab_index is None:
        _require(cfg, "features")
        features = C.read_features(cfg["features"])
    examples = _examples(records, cfg, manifest.parent, features, vocab_index)
    result, ranks = T.evaluate_retrieval(model, examples)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(E.format_retrieval(result), encoding="utf-8")
    (out / "ranks.csv").write_text(E.format_per_query([ex.utt_id for ex in examples], ranks),
                                   encoding="utf-8")
    write_run_log(out / "run.log", cfg, [f"queries = {len(examples)}"])
    print(E.format_retrieval(result).strip())
    return 0


def cmd_dump_activations(cfg: dict) -> int:
    _require(cfg, "manifest", "features", "checkpoint", "out")
    records = C.load_manifest(Path(cfg["manifest"]))
    features = C.read_features(cfg["features"])
    model, vocab_index = _load_model(cfg)
    if vocab_index is not None:
        raise CliError("dump-activations applies to speech models")
    items = [(r.utt_id, features[r.utt_id]) for r in records]
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    C.dump_activations(model, items, out)
    write_run_log(out.with_suffix(out.suffix + ".log"), cfg, [f"utterances = {len(items)}"])
    print(f"wrote activations for {len(items)} utterances to {out}")
    return 0


def _probe_features_for(cfg: dict, records) -> dict:
    """utt_id -> ProbeFeatures, from the activation archive or the live model."""
    if cfg["activations"]:
        return C.load_activations(cfg["activations"])
    _require(cfg, "features", "checkpoint")
    features = C.read_features(cfg["features"])
    model, vocab_index = _load_model(cfg)
    if vocab_index is not None:
        raise CliError("probes run on speech models")
    items = [(r.utt_id, features[r.utt_id]) for r in records]
    return {pf.utt_id: pf for pf in P.extract_probe_features(model, items)}


def cmd_probe(cfg: dict) -> int:
    _require(cfg, "manifest", "out")
    tasks = ["length", "wordpresence", "similarity", "homonym"] if cfg["task"] == "all" else [cfg["task"]]
    unknown = set(tasks) - {"length", "wordpresence", "similarity", "homonym"}
    if unknown:
        raise CliError(f"unknown probe task(s) {sorted(unknown)}")
    manifest = Path(cfg["manifest"])
    base = manifest.parent
    records = C.load_manifest(manifest)
    by_id = {r.utt_id: r for r in records}
    # probes run on validation utterances when that split is big enough
    val = [r for r in records if r.split == "val"]
    probe_recs = val if len(val) >= 10 else records
    feats_by_id = _probe_features_for(cfg, records)
    feats = [feats_by_id[r.utt_id] for r in probe_recs]
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for task in tasks:
        if task == "length":
            report = P.probe_length(feats, [len(r.transcript) for r in probe_recs], seed=cfg["seed"])
        elif task == "wordpresence":
            words_dir = Path(cfg["words_dir"]) if cfg["words_dir"] else base / "words"
            report = _run_word_presence(cfg, probe_recs, feats, words_dir)
        elif task == "similarity":
            report = _run_similarity(cfg, by_id, feats_by_id, base)
        else:
            report = _run_homonyms(cfg, records, feats_by_id, base)
        path = out / f"probe_{task}.txt"
        path.write_text(report.to_text(), encoding="utf-8")
        written.append(path.name)
    write_run_log(out / "run.log", cfg, [f"reports = {','.join(written)}"])
    print(f"wrote {', '.join(written)} to {out}")
    return 0


def _run_word_presence(cfg, probe_recs, feats, words_dir: Path):
    from .audiofeat import read_wav

    needed = sorted({w for r in probe_recs for w in r.transcript})
    word_audio = {}
    for w in needed:
        path = words_dir / f"{w}.wav"
        if not path.is_file():
            raise C.MissingResourceError(f"no isolated word audio for {w!r} at {path}")
        word_audio[w] = read_wav(path)
    word_vecs = P.word_target_vectors(word_audio)
    return P.probe_word_presence(feats, [r.transcript for r in probe_recs], word_vecs,
                                 seed=cfg["seed"])


def _run_similarity(cfg, by_id, feats_by_id, base: Path):
    _require(cfg, "pairs", "text_checkpoint")
    pairs = []
    for lineno, raw in enumerate(Path(cfg["pairs"]).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise CliError(f"{cfg['pairs']}:{lineno}: expected 'utt_a<TAB>utt_b<TAB>rating'")
        pairs.append((parts[0], parts[1], float(parts[2])))
    text_model, vocab_index = _load_model(cfg, "text_checkpoint", "text_preset")
    if vocab_index is None:
        raise CliError("--text-checkpoint must hold a text model")

    ids_a = [a for a, _, _ in pairs]
    ids_b = [b for _, b, _ in pairs]
    fa = [feats_by_id[i] for i in ids_a]
    fb = [feats_by_id[i] for i in ids_b]
    sets_a = P.feature_sets(fa)
    sets_b = P.feature_sets(fb)
    speech_sets = {name: (sets_a[name], sets_b[name]) for name in sets_a}
    with nc.no_grad():
        ta = np.stack([text_model.encode_text(_token_ids(by_id[i].transcript, vocab_index)).embedding.data
                       for i in ids_a])
        tb = np.stack([text_model.encode_text(_token_ids(by_id[i].transcript, vocab_index)).embedding.data
                       for i in ids_b])
    return P.probe_similarity(
        speech_sets, ta, tb,
        [by_id[i].transcript for i in ids_a], [by_id[i].transcript for i in ids_b],
        [r for _, _, r in pairs], seed=cfg["seed"])


def _run_homonyms(cfg, records, feats_by_id, base: Path):
    lexicon = C.load_lexicon(Path(cfg["lexicon"]) if cfg["lexicon"] else base / "lexicon.tsv")
    counts = C.load_counts(Path(cfg["counts"]) if cfg["counts"] else base / "counts.tsv")
    pairs = P.mine_homonyms(lexicon, counts)
    if not pairs:
        raise P.ProbeError("homonym mining produced no pairs for this corpus")
    recs = [r for r in records if r.split in ("train", "val")]
    feats = [feats_by_id[r.utt_id] for r in recs]
    return P.probe_homonyms(pairs, [r.transcript for r in recs], feats, seed=cfg["seed"])


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="groundedspeech",
        description="speech-image retrieval pipeline and representation probes")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, keys):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value config file")
        for key in keys:
            typ, _ = SCHEMA[key]
            flag = "--" + key.replace("_", "-")
            if typ is bool:
                p.add_argument(flag, action="store_const", const=True, default=None)
            else:
                p.add_argument(flag, type=typ, default=None)
        return p

    common = ["seed", "out"]
    add("synth", "generate a synthetic corpus directory",
        common + ["vocab_size", "homonym_pairs", "words_min", "words_max", "image_dim",
                  "noise", "n_train", "n_val", "n_test", "homonym_count_a", "homonym_count_b"])
    add("featurize", "acoustic features for every manifest utterance",
        common + ["manifest", "deltas"])
    add("train", "train a retrieval model",
        common + ["preset", "manifest", "features", "margin", "lr", "batch", "epochs", "stop_loss"])
    add("evaluate", "image retrieval metrics for a checkpoint",
        common + ["preset", "manifest", "features", "checkpoint", "split"])
    add("dump-activations", "persist probe features for all utterances",
        common + ["preset", "manifest", "features", "checkpoint"])
    add("probe", "run representation probes",
        common + ["preset", "manifest", "features", "checkpoint", "activations", "task",
                  "pairs", "lexicon", "counts", "words_dir", "text_checkpoint", "text_preset"])
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "featurize": cmd_featurize,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "dump-activations": cmd_dump_activations,
    "probe": cmd_probe,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = effective_config(args)
        return COMMANDS[args.command](cfg)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
