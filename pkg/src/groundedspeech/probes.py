"""Representation probes: what the trained encoder's layers know.

Four analyses run over frozen features of each utterance — the time-mean
of the input features, the L2-normalized time-mean of every hidden layer's
activations, and the final joint-space embedding:

* utterance length regression (ridge, closed form),
* word presence detection (one-hidden-layer MLP on concatenated
  utterance and word-target features),
* sentence-pair similarity correlations against human ratings, a text
  model, and character edit similarity (with bootstrap spread),
* homonym disambiguation (logistic regression under stratified CV,
  scored as relative error reduction against the majority baseline).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import StratifiedKFold

from . import numcore as nc
from .audiofeat import mfcc
from .numcore import Tensor
from .seeding import substream
from .stopwords import STOPWORDS
from .training import AdamState, adam_step

# spelling pairs that are mere variants, not distinct meanings
VARIANT_SPELLINGS = frozenset(map(frozenset, [
    ("theater", "theatre"), ("center", "centre"), ("color", "colour"),
    ("gray", "grey"), ("donut", "doughnut"), ("ax", "axe"),
]))


class InsufficientDataError(ValueError):
    """Too few samples to run a probe."""


class UndefinedCorrelationError(ValueError):
    """Pearson correlation of a zero-variance sequence."""


class ProbeError(ValueError):
    """Probe setup cannot be satisfied (degenerate folds, unpairable words)."""


# ---------------------------------------------------------------------------
# features


@dataclass
class ProbeFeatures:
    utt_id: str
    avg_input: np.ndarray      # time-mean of the acoustic features
    avg_layers: list           # per layer: unit-norm time-mean of activations
    utt_emb: np.ndarray        # final joint-space embedding
    timestep_count: int


def extract_probe_features(model, items) -> list:
    """Run the encoder once per (utt_id, feature_matrix) and pool."""
    out = []
    with nc.no_grad():
        for utt_id, feats in items:
            feats = np.asarray(feats)
            enc = model.encode_utterance(feats)
            avg_layers = []
            for seq in enc.layer_states:
                m = seq.data.mean(axis=0)
                avg_layers.append(nc.l2_normalize(Tensor(m)).data.copy())
            out.append(ProbeFeatures(
                utt_id=utt_id,
                avg_input=feats.mean(axis=0).astype(np.float32),
                avg_layers=avg_layers,
                utt_emb=enc.embedding.data.copy(),
                timestep_count=enc.n_steps))
    return out


def feature_sets(features, include_timesteps: bool = False) -> dict:
    """Stack per-utterance features into name -> (n, d) design matrices.

    Set names follow the layer axis used in the reports: avg_input sits at
    layer 0, layer{n} at n, utt_emb at k+1; timestep_count is off-axis.
    """
    sets = {"avg_input": np.stack([f.avg_input for f in features])}
    n_layers = len(features[0].avg_layers)
    for n in range(n_layers):
        sets[f"layer{n + 1}"] = np.stack([f.avg_layers[n] for f in features])
    sets["utt_emb"] = np.stack([f.utt_emb for f in features])
    if include_timesteps:
        sets["timestep_count"] = np.array([[float(f.timestep_count)] for f in features])
    return sets


def layer_axis(set_name: str, n_layers: int) -> int:
    if set_name == "avg_input":
        return 0
    if set_name == "utt_emb":
        return n_layers + 1
    if set_name.startswith("layer"):
        return int(set_name[5:])
    return -1  # off-axis features (timestep count)


def word_target_vectors(word_audio: dict) -> dict:
    """Time-mean MFCC vector of each isolated word's audio."""
    return {w: mfcc(sig).frames.mean(axis=0) for w, sig in word_audio.items()}


# ---------------------------------------------------------------------------
# reports


@dataclass
class ProbeRow:
    task: str
    feature_set: str
    layer: int
    metric: str
    value: float
    ci_low: float | None = None
    ci_high: float | None = None

    def __post_init__(self):
        vals = [self.value] + [v for v in (self.ci_low, self.ci_high) if v is not None]
        if not np.isfinite(vals).all():
            raise ProbeError(f"non-finite probe metric {self.metric} = {vals}")


@dataclass
class ProbeReport:
    task: str
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, feature_set, layer, metric, value, ci_low=None, ci_high=None):
        self.rows.append(ProbeRow(self.task, feature_set, layer, metric,
                                  float(value), ci_low, ci_high))

    def value(self, feature_set: str, metric: str) -> float:
        for r in self.rows:
            if r.feature_set == feature_set and r.metric == metric:
                return r.value
        raise KeyError(f"no row for ({feature_set}, {metric})")

    def to_text(self) -> str:
        lines = [f"# {k} = {v}" for k, v in sorted(self.metadata.items())]
        lines.append("task\tfeature_set\tlayer\tmetric\tvalue\tci_low\tci_high")
        for r in self.rows:
            lo = "" if r.ci_low is None else f"{r.ci_low:.6f}"
            hi = "" if r.ci_high is None else f"{r.ci_high:.6f}"
            lines.append(f"{r.task}\t{r.feature_set}\t{r.layer}\t{r.metric}\t{r.value:.6f}\t{lo}\t{hi}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# ridge regression and correlation


def ridge_fit_predict(x_train, y_train, x_test, y_test, alpha: float = 1.0):
    """Closed-form ridge with an unpenalized intercept via column centering.

    Returns (test predictions, test R^2). R^2 is 0 by convention when the
    test targets have no variance.
    """
    xtr = np.asarray(x_train, dtype=np.float64)
    ytr = np.asarray(y_train, dtype=np.float64).reshape(-1)
    xte = np.asarray(x_test, dtype=np.float64)
    if xtr.ndim != 2 or xtr.shape[0] != ytr.shape[0]:
        raise ValueError(f"design {xtr.shape} does not match targets {ytr.shape}")
    if xtr.shape[0] < 2:
        raise InsufficientDataError("ridge needs at least 2 training rows")
    if not (np.isfinite(xtr).all() and np.isfinite(ytr).all() and np.isfinite(xte).all()):
        raise ValueError("non-finite values in ridge inputs")
    pred = _ridge_predict(xtr, ytr, xte, alpha)
    return pred, r_squared(y_test, pred)


def r_squared(y_true, y_pred) -> float:
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    sst = float(((y_true - y_true.mean()) ** 2).sum())
    if sst == 0.0:
        return 0.0
    sse = float(((y_true - y_pred) ** 2).sum())
    return 1.0 - sse / sst


def pearson_r(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError(f"need two equal-length sequences of >= 2 values, got {x.shape} and {y.shape}")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0.0:
        raise UndefinedCorrelationError("correlation undefined for zero-variance input")
    return float((xc * yc).sum() / denom)


def levenshtein_similarity(a: str, b: str) -> float:
    """1 - edit_distance / max(len); two empty strings count as identical."""
    if not a and not b:
        return 1.0
    return 1.0 - edit_distance(a, b) / max(len(a), len(b))


def edit_distance(a: str, b: str) -> int:
    """Plain dynamic-programming Levenshtein distance (two-row variant)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, cb in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb))
        prev = cur
    return prev[-1]


def zscore_columns(mat: np.ndarray) -> np.ndarray:
    """Center each dimension and scale by its std; zero-variance dims are
    centered only."""
    m = np.asarray(mat, dtype=np.float64)
    mu = m.mean(axis=0)
    sd = m.std(axis=0)
    out = m - mu
    nz = sd > 0
    out[:, nz] = out[:, nz] / sd[nz]
    return out


def _row_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if (na == 0).any() or (nb == 0).any():
        raise ProbeError("cosine similarity of an all-zero vector")
    return (a * b).sum(axis=1) / (na * nb)


# ---------------------------------------------------------------------------
# probe tasks


def probe_length(features, word_counts, seed: int = 0, train_frac: float = 0.8) -> ProbeReport:
    """Ridge-regress utterance length in words from each feature set."""
    y = np.asarray(word_counts, dtype=np.float64)
    if len(features) != y.size:
        raise ValueError("one word count per utterance required")
    if len(features) < 10:
        raise InsufficientDataError(f"length probe needs >= 10 utterances, got {len(features)}")
    rng = substream(seed, "length-probe")
    order = rng.permutation(len(features))
    n_train = int(round(train_frac * len(features)))
    tr, te = order[:n_train], order[n_train:]
    sets = feature_sets(features, include_timesteps=True)
    n_layers = len(features[0].avg_layers)
    report = ProbeReport("length", metadata={
        "seed": seed, "n_train": len(tr), "n_test": len(te)})
    for name, mat in sets.items():
        pred = _ridge_predict(mat[tr], y[tr], mat[te])
        report.add(name, layer_axis(name, n_layers), "r2", r_squared(y[te], pred))
    return report


def _ridge_predict(xtr, ytr, xte, alpha: float = 1.0) -> np.ndarray:
    xtr = np.asarray(xtr, dtype=np.float64)
    ytr = np.asarray(ytr, dtype=np.float64).reshape(-1)
    xte = np.asarray(xte, dtype=np.float64)
    x_mean = xtr.mean(axis=0)
    y_mean = ytr.mean()
    xc = xtr - x_mean
    w = np.linalg.solve(xc.T @ xc + alpha * np.eye(xtr.shape[1]), xc.T @ (ytr - y_mean))
    return (xte - x_mean) @ w + y_mean


class MlpClassifier:
    """Binary classifier with one rectifier hidden layer, trained by Adam
    with a small early-stopping holdout."""

    def __init__(self, in_dim: int, hidden: int = 1024, seed: int = 0, lr: float = 1e-3,
                 batch_size: int = 128, max_epochs: int = 200, holdout_frac: float = 0.1,
                 patience: int = 20):
        rng = substream(seed, "mlp-init")
        r1 = np.sqrt(6.0 / (in_dim + hidden))
        r2 = np.sqrt(6.0 / (hidden + 1))
        self.params = {
            "w1": Tensor(rng.uniform(-r1, r1, size=(in_dim, hidden)).astype(np.float32), requires_grad=True),
            "b1": Tensor(np.zeros(hidden, dtype=np.float32), requires_grad=True),
            "w2": Tensor(rng.uniform(-r2, r2, size=(hidden, 1)).astype(np.float32), requires_grad=True),
            "b2": Tensor(np.zeros(1, dtype=np.float32), requires_grad=True),
        }
        self.seed = seed
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.holdout_frac = holdout_frac
        self.patience = patience
        self._mu = None
        self._sd = None

    def _logits(self, x: np.ndarray) -> Tensor:
        h = nc.relu(nc.add(nc.matmul(Tensor(x.astype(np.float32)), self.params["w1"]), self.params["b1"]))
        return nc.reshape(nc.add(nc.matmul(h, self.params["w2"]), self.params["b2"]), (x.shape[0],))

    def fit(self, x: np.ndarray, y: np.ndarray) -> "MlpClassifier":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float32).reshape(-1)
        # standardize inputs; remember the transform for predict()
        self._mu = x.mean(axis=0)
        sd = x.std(axis=0)
        self._sd = np.where(sd > 0, sd, 1.0)
        x = (x - self._mu) / self._sd
        rng = substream(self.seed, "mlp-train")
        order = rng.permutation(len(y))
        n_hold = max(1, int(round(self.holdout_frac * len(y))))
        hold, tr = order[:n_hold], order[n_hold:]
        state = AdamState.for_params(self.params)
        best = {k: p.data.copy() for k, p in self.params.items()}
        best_acc = -1.0
        since_best = 0
        for _epoch in range(self.max_epochs):
            perm = rng.permutation(len(tr))
            for start in range(0, len(perm), self.batch_size):
                idx = tr[perm[start:start + self.batch_size]]
                nc.zero_grads(self.params)
                loss = nc.sigmoid_cross_entropy(self._logits(x[idx]), y[idx])
                loss.backward()
                adam_step(self.params, state, self.lr)
            with nc.no_grad():
                acc = float(((self._logits(x[hold]).data > 0) == (y[hold] > 0.5)).mean())
            if acc > best_acc:
                best_acc = acc
                best = {k: p.data.copy() for k, p in self.params.items()}
                since_best = 0
            else:
                since_best += 1
                if since_best >= self.patience:
                    break
        for k, p in self.params.items():
            p.data = best[k]
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = (np.asarray(x, dtype=np.float64) - self._mu) / self._sd
        with nc.no_grad():
            return (self._logits(x).data > 0).astype(int)

    def score(self, x: np.ndarray, y: np.ndarray) -> float:
        return float((self.predict(x) == np.asarray(y).reshape(-1)).mean())


def pair_word_targets(transcripts, stopwords, seed: int = 0):
    """Pick one positive content word per utterance and recycle the positives
    as negatives for other utterances, keeping the label base rate at 1/2."""
    rng = substream(seed, "word-presence-pairing")
    positives = []
    usable = []
    for i, words in enumerate(transcripts):
        content = sorted(set(w for w in words if w not in stopwords))
        if not content:
            continue
        positives.append(content[int(rng.integers(len(content)))])
        usable.append(i)
    if len(usable) < 2:
        raise ProbeError("not enough utterances with content words to pair negatives")
    word_sets = [set(transcripts[i]) for i in usable]
    for _attempt in range(50):
        pool = list(rng.permutation(positives))
        negatives = []
        ok = True
        for i in range(len(usable)):
            pick = next((j for j, w in enumerate(pool) if w not in word_sets[i]), None)
            if pick is None:
                ok = False
                break
            negatives.append(pool.pop(pick))
        if ok:
            return usable, positives, negatives
    raise ProbeError("vocabulary too small to pair negative word targets")


def probe_word_presence(features, transcripts, word_vecs: dict, seed: int = 0,
                        train_frac: float = 0.8, stopwords=STOPWORDS,
                        mlp_kwargs: dict | None = None) -> ProbeReport:
    """MLP detection of whether a target word occurs in the utterance.

    Each instance concatenates an utterance feature vector with the target
    word's acoustic vector; every utterance contributes one positive and one
    negative instance.
    """
    usable, positives, negatives = pair_word_targets(transcripts, stopwords, seed)
    feats = [features[i] for i in usable]
    rng = substream(seed, "word-presence-split")
    order = rng.permutation(len(usable))
    n_train = int(round(train_frac * len(usable)))
    tr_utts, te_utts = set(order[:n_train].tolist()), set(order[n_train:].tolist())
    if not tr_utts or not te_utts:
        raise InsufficientDataError("word presence probe needs a non-empty train and test split")
    sets = feature_sets(feats)
    n_layers = len(feats[0].avg_layers)
    report = ProbeReport("wordpresence", metadata={
        "seed": seed, "n_train": 2 * len(tr_utts), "n_test": 2 * len(te_utts)})
    for name, mat in sets.items():
        rows, labels, groups = [], [], []
        for i in range(len(usable)):
            for word, label in ((positives[i], 1), (negatives[i], 0)):
                rows.append(np.concatenate([mat[i], word_vecs[word]]))
                labels.append(label)
                groups.append(i)
        x = np.stack(rows)
        y = np.array(labels)
        groups = np.array(groups)
        tr_mask = np.isin(groups, list(tr_utts))
        te_mask = np.isin(groups, list(te_utts))
        clf = MlpClassifier(x.shape[1], seed=seed, **(mlp_kwargs or {}))
        clf.fit(x[tr_mask], y[tr_mask])
        report.add(name, layer_axis(name, n_layers), "accuracy", clf.score(x[te_mask], y[te_mask]))
    return report


def bootstrap_pearson(x: np.ndarray, y: np.ndarray, n_boot: int, rng) -> np.ndarray:
    """Pearson r over bootstrap resamples of the pair index set."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.size
    draws = np.empty(n_boot)
    done = 0
    while done < n_boot:
        take = min(n_boot - done, 2048)
        idx = rng.integers(0, n, size=(take, n))
        xs, ys = x[idx], y[idx]
        xc = xs - xs.mean(axis=1, keepdims=True)
        yc = ys - ys.mean(axis=1, keepdims=True)
        denom = np.sqrt((xc * xc).sum(axis=1) * (yc * yc).sum(axis=1))
        valid = denom > 0
        r = np.where(valid, (xc * yc).sum(axis=1) / np.where(valid, denom, 1.0), np.nan)
        keep = r[valid]
        draws[done:done + keep.size] = keep[:n_boot - done]
        done += min(keep.size, n_boot - done)
    return draws


def probe_similarity(speech_sets: dict, text_a: np.ndarray, text_b: np.ndarray,
                     transcripts_a, transcripts_b, ratings, n_boot: int = 10_000,
                     seed: int = 0, n_layers: int | None = None) -> ProbeReport:
    """Correlate per-feature-set cosine similarities of sentence pairs with
    human ratings, text-model similarities, and edit similarity.

    ``speech_sets`` maps feature-set name -> (A, B) matrices, row i holding
    the two sentences of pair i. All vectors are z-scored per dimension
    across the vectors entering the comparison before cosines are taken.
    """
    ratings = np.asarray(ratings, dtype=np.float64)
    n = ratings.size
    if n < 2:
        raise InsufficientDataError("similarity probe needs at least 2 pairs")
    tz = zscore_columns(np.vstack([text_a, text_b]))
    text_sim = _row_cosine(tz[:n], tz[n:])
    edit_sim = np.array([levenshtein_similarity(" ".join(a), " ".join(b))
                         for a, b in zip(transcripts_a, transcripts_b)])
    targets = {"human": ratings, "text_model": text_sim, "edit": edit_sim}
    if n_layers is None:
        n_layers = sum(1 for k in speech_sets if k.startswith("layer"))
    report = ProbeReport("similarity", metadata={"seed": seed, "n_pairs": n, "n_boot": n_boot})
    for name, (a, b) in speech_sets.items():
        z = zscore_columns(np.vstack([a, b]))
        sim = _row_cosine(z[:n], z[n:])
        for target_name, target in targets.items():
            rng = substream(seed, f"similarity-boot-{name}-{target_name}")
            point = pearson_r(sim, target)
            draws = bootstrap_pearson(sim, target, n_boot, rng)
            report.add(name, layer_axis(name, n_layers), f"pearson_r_{target_name}",
                       point, float(np.percentile(draws, 2.5)), float(np.percentile(draws, 97.5)))
    return report


def mine_homonyms(lexicon: dict, counts: dict, stopwords=STOPWORDS,
                  variant_spellings=VARIANT_SPELLINGS, min_count: int = 20,
                  max_share: float = 0.95) -> list:
    """Spelling pairs that share a pronunciation and pass the frequency,
    meaning and function-word filters. Deterministic order."""
    by_pron = {}
    for word, pron in lexicon.items():
        by_pron.setdefault(pron, []).append(word)
    pairs = []
    for pron in sorted(by_pron):
        group = sorted(set(by_pron[pron]))
        for a, b in itertools.combinations(group, 2):
            ca, cb = counts.get(a, 0), counts.get(b, 0)
            if ca <= min_count or cb <= min_count:
                continue
            if frozenset((a, b)) in variant_spellings:
                continue
            if a in stopwords or b in stopwords:
                continue
            if max(ca, cb) / (ca + cb) >= max_share:
                continue
            pairs.append((a, b))
    return pairs


def probe_homonyms(pairs, transcripts, features, seed: int = 0,
                   n_folds: int = 10) -> ProbeReport:
    """Per pair and feature set: can a linear classifier tell which spelling
    an utterance contains? Scored as relative error reduction against the
    majority baseline (negative values allowed)."""
    sets = feature_sets(features)
    n_layers = len(features[0].avg_layers)
    report = ProbeReport("homonym", metadata={
        "seed": seed, "n_pairs": len(pairs), "n_folds": n_folds})
    per_set_rers = {name: [] for name in sets}
    word_sets = [set(t) for t in transcripts]
    for a, b in pairs:
        idx = [i for i in range(len(transcripts))
               if (a in word_sets[i]) != (b in word_sets[i])]
        labels = np.array([1 if a in word_sets[i] else 0 for i in idx])
        if len(set(labels.tolist())) < 2:
            raise ProbeError(f"pair {a}/{b}: only one form occurs in the corpus")
        for name, mat in sets.items():
            x = mat[idx].astype(np.float64)
            norms = np.linalg.norm(x, axis=1, keepdims=True)
            x = x / np.where(norms > 0, norms, 1.0)
            rer = _cv_rer(x, labels, seed, n_folds, f"{a}/{b}", name)
            per_set_rers[name].append(rer)
            report.add(name, layer_axis(name, n_layers), f"rer:{a}/{b}", rer)
    for name, rers in per_set_rers.items():
        if rers:
            report.add(name, layer_axis(name, n_layers), "rer_mean", float(np.mean(rers)))
    return report


def _cv_rer(x, y, seed, n_folds, pair_name, set_name) -> float:
    counts = np.bincount(y, minlength=2)
    err_majority = counts.min() / counts.sum()
    if err_majority == 0.0:
        raise ProbeError(f"pair {pair_name}: single-class instance set")
    folds = StratifiedKFold(n_splits=n_folds, shuffle=True,
                            random_state=int(substream(seed, f"homonym-{pair_name}").integers(2**31)))
    errors = 0
    try:
        for tr, te in folds.split(x, y):
            clf = LogisticRegression(max_iter=1000)
            clf.fit(x[tr], y[tr])
            errors += int((clf.predict(x[te]) != y[te]).sum())
    except ValueError as exc:
        raise ProbeError(f"pair {pair_name}, features {set_name}: cannot stratify "
                         f"{counts.tolist()} instances into {n_folds} folds: {exc}") from exc
    err_model = errors / len(y)
    return (err_majority - err_model) / err_majority
