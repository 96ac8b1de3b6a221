"""Config-driven pipeline stages shared by the command line and the acceptance suite."""

import configparser
import hashlib
import json
import logging
import os
import platform
from pathlib import Path

import numpy as np

from . import __version__, attnpolicy, corpus, neatlm, neatqa, nn, synth

log = logging.getLogger(__name__)

DESK_PROFILE = Path(__file__).with_name("desk.ini")
OUT_DIR_ENV = "NEATREAD_OUT_DIR"

# fixed stream ids so each stage draws from its own reproducible generator
STAGES = {"corpus": 1, "lm_init": 2, "lm_train": 3, "attn_init": 4, "attn_train": 5,
          "qa_corpus": 6, "qa_emb": 7, "qa_head": 8, "qa_train": 9, "qa_policy": 10,
          "simulate": 11, "evaluate": 12, "sweep": 13}


class ConfigError(ValueError):
    pass


PATH_KEYS = (("corpus", "path"), ("qa_corpus", "path"), ("evaluate", "gold"),
             ("evaluate", "predictions"), ("etk", "fixations"), ("etk", "regions"),
             ("export", "gold_measures"))


def load_config(path=None, overrides=()):
    """Desk profile, then ``path`` on top, then ``section.key=value`` overrides."""
    cfg = configparser.ConfigParser(interpolation=None)
    cfg.read(DESK_PROFILE, encoding="utf-8")
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file {path} not found")
        user = configparser.ConfigParser(interpolation=None)
        user.read(path, encoding="utf-8")
        # relative file names in a config file are relative to that file
        base = Path(path).resolve().parent
        for section, key in PATH_KEYS:
            value = user.get(section, key, fallback="").strip()
            if value and value != "synthetic" and not Path(value).is_absolute():
                user.set(section, key, str(base / value))
        cfg.read_dict(user)
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        if not cfg.has_section(section):
            cfg.add_section(section)
        cfg.set(section, name, value.strip())
    validate_config(cfg)
    return cfg


def _num(cfg, section, key, kind=float):
    try:
        return kind(cfg.get(section, key))
    except (configparser.Error, ValueError) as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from None


def validate_config(cfg):
    checks = [
        ("lm", "p", lambda v: 0.0 < v <= 1.0, "must lie in (0, 1]"),
        ("attn", "alpha", lambda v: v >= 0, "must be >= 0"),
        ("qa_policy", "alpha", lambda v: v >= 0, "must be >= 0"),
    ]
    for section in ("lm", "attn", "qa_head", "qa_policy"):
        checks.append((section, "momentum", lambda v: 0.0 <= v < 1.0, "must lie in [0, 1)"))
        checks.append((section, "learning_rate", lambda v: v > 0, "must be > 0"))
    for section, key, ok, msg in checks:
        if cfg.has_option(section, key) and not ok(_num(cfg, section, key)):
            raise ConfigError(f"[{section}] {key} = {cfg.get(section, key)} {msg}")
    for section in ("lm", "attn", "qa_head", "qa_policy"):
        for key in ("epochs", "batch_size"):
            if cfg.has_option(section, key) and _num(cfg, section, key, int) < 1:
                raise ConfigError(f"[{section}] {key} must be a positive integer")
    for section, key in (("corpus", "path"), ("qa_corpus", "path")):
        if cfg.has_option(section, key):
            value = cfg.get(section, key)
            if value not in ("", "synthetic") and not Path(value).exists():
                raise ConfigError(f"[{section}] {key}: {value} does not exist")


def config_text(cfg):
    lines = []
    for section in sorted(cfg.sections()):
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in sorted(cfg.items(section)))
    return "\n".join(lines) + "\n"


def config_hash(cfg):
    return hashlib.sha256(config_text(cfg).encode("utf-8")).hexdigest()


def seed_of(cfg):
    return _num(cfg, "run", "seed", int)


def stage_rng(cfg, stage, *extra):
    return np.random.default_rng([seed_of(cfg), STAGES[stage], *extra])


def out_dir(cfg, override=None):
    path = override or os.environ.get(OUT_DIR_ENV) or cfg.get("run", "out_dir")
    Path(path).mkdir(parents=True, exist_ok=True)
    return Path(path)


def versions():
    import scipy
    return {"neatread": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def write_manifest(directory, command, cfg, outputs, partial=False, error=""):
    doc = {"command": command, "config_hash": config_hash(cfg), "seed": seed_of(cfg),
           "config": {s: dict(cfg.items(s)) for s in sorted(cfg.sections())},
           "versions": versions(), "outputs": sorted(str(o) for o in outputs),
           "partial": partial}
    if error:
        doc["error"] = error
    path = Path(directory) / f"manifest_{command}.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def write_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


# -- Study 1 ----------------------------------------------------------------

class LMCorpus:
    """Vocabulary plus train/held-out windows, with per-window document provenance."""

    def __init__(self, vocab, docs, tags, windows, provenance, n_heldout):
        self.vocab = vocab
        self.docs = docs
        self.tags = tags
        self.windows = windows
        self.provenance = provenance  # (doc index, start offset) per window
        self.n_heldout = n_heldout

    @property
    def train(self):
        return self.windows[:len(self.windows) - self.n_heldout]

    @property
    def heldout(self):
        return self.windows[len(self.windows) - self.n_heldout:]

    def heldout_provenance(self):
        return self.provenance[len(self.windows) - self.n_heldout:]


def lm_corpus(cfg):
    c = cfg["corpus"]
    width = int(c["window"])
    path = c.get("path", "synthetic")
    if path in ("", "synthetic"):
        rng = stage_rng(cfg, "corpus")
        docs, tags = synth.grammar_corpus(int(c["n_docs"]), int(c["doc_len"]), rng)
    else:
        docs = corpus.read_text_corpus(path)
        tags = None
    vocab = corpus.build_vocab([t for d in docs for t in d], int(c["vocab_size"]))
    windows, prov = [], []
    for k, doc in enumerate(docs):
        for w in corpus.window_split(vocab.encode(doc), width, k):
            windows.append(w.ids)
            prov.append(w.offsets[0])
    if not windows:
        raise corpus.EmptyCorpusError("no complete windows in the corpus")
    n_heldout = min(int(c["heldout_windows"]), len(windows) // 2)
    return LMCorpus(vocab, docs, tags, np.asarray(windows, dtype=np.int64), prov, n_heldout)


def new_lm(cfg, vocab):
    c = cfg["lm"]
    return neatlm.Study1Model(len(vocab), int(c["emb_dim"]), int(c["hidden_dim"]),
                              vocab.skip_id, vocab.bos_id, rng=stage_rng(cfg, "lm_init"),
                              init_scale=float(c["init_scale"]))


def train_lm(cfg, data, log_path=None):
    c = cfg["lm"]
    model = new_lm(cfg, data.vocab)
    history = neatlm.train_phase1(
        model, data.train, float(c["p"]), int(c["epochs"]), stage_rng(cfg, "lm_train"),
        learning_rate=float(c["learning_rate"]), momentum=float(c["momentum"]),
        batch_size=int(c["batch_size"]), clip=float(c["clip"]), heldout=data.heldout,
        log_path=log_path)
    return model, history


def attn_config(cfg, alpha=None):
    c = cfg["attn"]
    return attnpolicy.TradeoffConfigS1(
        alpha=float(c["alpha"]) if alpha is None else alpha,
        entropy_weight=float(c["entropy_weight"]), learning_rate=float(c["learning_rate"]),
        momentum=float(c["momentum"]), clip=float(c["clip"]),
        batch_size=int(c["batch_size"]), baseline_lr=float(c["baseline_lr"]),
        use_baseline=cfg.getboolean("attn", "use_baseline"))


def train_attention(cfg, model, windows, alpha=None, run=0):
    tcfg = attn_config(cfg, alpha)
    net = attnpolicy.AttentionNetS1(model.emb_dim, model.hidden_dim,
                                    stage_rng(cfg, "attn_init", run))
    trainer = attnpolicy.PolicyTrainer(model, net, tcfg, stage_rng(cfg, "attn_train", run))
    history = trainer.train(windows, int(cfg["attn"]["epochs"]))
    return net, history


def save_lm(path, model, vocab, net=None):
    groups = {"lm": model.params}
    if net is not None:
        groups["attn"] = net.params
    meta = {"model": model.config(), "vocab": vocab.to_json()}
    nn.save_checkpoint(path, groups, meta)


def load_lm(path):
    groups, meta = nn.load_checkpoint(path)
    mc = meta["model"]
    model = neatlm.Study1Model(mc["vocab_size"], mc["emb_dim"], mc["hidden_dim"],
                               mc["skip_id"], mc["bos_id"])
    nn.assign_params(model.params, groups["lm"])
    model.embeddings_trainable = False
    net = None
    if "attn" in groups:
        net = attnpolicy.AttentionNetS1(model.emb_dim, model.hidden_dim)
        nn.assign_params(net.params, groups["attn"])
    return model, corpus.Vocabulary.from_json(meta["vocab"]), net


def full_surprisal(model, windows):
    trace = neatlm.read_window(model, windows, np.ones(np.shape(windows)))
    return neatlm.restricted_surprisal(trace, windows).T


def simulate_records(model, net, data, rng, which="heldout"):
    """(doc, position, token, prob, sampled) for every token of the chosen windows."""
    windows = data.heldout if which == "heldout" else data.windows
    prov = data.heldout_provenance() if which == "heldout" else data.provenance
    ro = attnpolicy.rollout(model, net, windows, rng)
    records = []
    for b, (doc, start) in enumerate(prov):
        for i, tok_id in enumerate(windows[b]):
            records.append((f"d{doc:03d}", start + i, data.vocab.token_of[tok_id],
                            ro.probs[b, i], ro.omega[b, i]))
    return records, ro


# -- Study 2 ----------------------------------------------------------------

def qa_corpus(cfg):
    c = cfg["qa_corpus"]
    path = c.get("path", "synthetic")
    if path in ("", "synthetic"):
        rng = stage_rng(cfg, "qa_corpus")
        train = synth.cloze_corpus(int(c["n_train"]), rng)
        test = synth.cloze_corpus(int(c["n_test"]), rng)
    else:
        examples = corpus.load_qa_triples(path, clip=int(c.get("clip", corpus.CLIP_LENGTH)))
        n_test = min(int(c["n_test"]), len(examples) // 2)
        train, test = examples[:len(examples) - n_test], examples[len(examples) - n_test:]
    toks = [t for e in train + test for t in e.text + e.question]
    vocab = corpus.build_vocab(toks, int(c["vocab_size"]))
    entities = corpus.entity_inventory(train + test)
    return neatqa.QAData(train, vocab, entities), neatqa.QAData(test, vocab, entities)


def qa_policy_config(cfg, alpha=None):
    c = cfg["qa_policy"]
    return neatqa.QATradeoffConfig(
        alpha=float(c["alpha"]) if alpha is None else alpha,
        entropy_weight=float(c["entropy_weight"]), learning_rate=float(c["learning_rate"]),
        momentum=float(c["momentum"]), batch_size=int(c["batch_size"]), clip=float(c["clip"]),
        use_baseline=cfg.getboolean("qa_policy", "use_baseline"),
        baseline_decay=float(c["baseline_decay"]),
        exact_rate_gradient=cfg.getboolean("qa_policy", "exact_rate_gradient"))


def train_qa_head(cfg, train):
    """Fit the head under annealed random skipping, then keep examples it answers fully."""
    c = cfg["qa_head"]
    emb = corpus.EmbeddingStore.random(len(train.vocab), int(c["emb_dim"]),
                                       stage_rng(cfg, "qa_emb"), scale=float(c["emb_scale"]),
                                       trainable=False)
    head = neatqa.QAHead(emb.matrix, train.n_entities, int(c["hidden_dim"]),
                         train.vocab.skip_id, stage_rng(cfg, "qa_head"))
    history = neatqa.train_qa_head(
        head, train, int(c["epochs"]), stage_rng(cfg, "qa_head", 1),
        learning_rate=float(c["learning_rate"]), momentum=float(c["momentum"]),
        batch_size=int(c["batch_size"]), clip=float(c["clip"]),
        start_rate=float(c["anneal_start"]), end_rate=float(c["anneal_end"]),
        full_epochs=int(c["full_epochs"]))
    keep = neatqa.filter_answerable(head, train)
    return head, train.subset(keep), history


def train_qa_policy(cfg, head, train, alpha=None, run=0, scaler=None):
    scaler = scaler or neatqa.fit_feature_scaler(train)
    rng = stage_rng(cfg, "qa_policy", run)
    attn = neatqa.QAAttention(head.emb.shape[1], scaler, rng)
    history = neatqa.train_qa_attention(attn, head, train, qa_policy_config(cfg, alpha), rng,
                                        int(cfg["qa_policy"]["epochs"]))
    return attn, history


def save_qa(path, head, attn, data, scaler):
    groups = {"head": head.params}
    if attn is not None:
        groups["attn"] = attn.params
    meta = {"vocab": data.vocab.to_json(), "entities": data.entity_index,
            "hidden_dim": head.hidden_dim, "n_entities": head.n_entities,
            "skip_id": head.skip_id, "scaler": scaler.to_dict() if scaler else None}
    nn.save_checkpoint(path, groups, meta)


def sweep_grid(cfg):
    c = cfg["sweep"]
    if c.get("grid", "").strip():
        return [float(a) for a in c["grid"].split(",")]
    return neatqa.alpha_grid(float(c["start"]), float(c["stop"]), float(c["step"]))


def run_sweep(cfg, head, train, test, on_point=None):
    c = cfg["sweep"]
    return neatqa.alpha_sweep(head, train, test, sweep_grid(cfg), int(c["runs"]),
                              qa_policy_config(cfg), seed_of(cfg),
                              int(cfg["qa_policy"]["epochs"]), eval_samples=int(c["eval_samples"]),
                              on_point=on_point, workers=int(c["workers"]))
