"""Command-line entry point: ``neatread <subcommand> [--config FILE] [--set section.key=value]``."""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import attnpolicy, corpus, etk, evalharness, neatqa, nn
from . import pipeline as P

log = logging.getLogger("neatread")


def _outputs(paths, root):
    return [str(Path(p).relative_to(root)) if Path(p).is_relative_to(root) else str(p)
            for p in paths]


def _jsonl(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def _lm_checkpoint(args, out):
    path = Path(args.checkpoint) if args.checkpoint else out / "attn.ckpt.json"
    if not path.is_file():
        raise P.ConfigError(f"checkpoint {path} not found; run train-attn first")
    return path


def cmd_preprocess(cfg, out, args):
    data = P.lm_corpus(cfg)
    train, test = P.qa_corpus(cfg)
    files = [P.write_json(data.vocab.to_json(), out / "vocab.json"),
             P.write_json({"windows": data.windows.tolist(), "provenance": data.provenance,
                           "n_heldout": data.n_heldout}, out / "lm_windows.json"),
             P.write_json(train.vocab.to_json(), out / "qa_vocab.json")]
    corpus.write_qa_jsonl(train.examples, out / "qa_train.jsonl")
    corpus.write_qa_jsonl(test.examples, out / "qa_test.jsonl")
    files += [out / "qa_train.jsonl", out / "qa_test.jsonl"]
    print(f"{len(data.windows)} LM windows, vocabulary {len(data.vocab)}; "
          f"{len(train)} / {len(test)} QA examples")
    return files


def cmd_train_lm(cfg, out, args):
    data = P.lm_corpus(cfg)
    hist_path = out / "lm_history.jsonl"
    model, history = P.train_lm(cfg, data, log_path=hist_path)
    ckpt = out / "lm.ckpt.json"
    P.save_lm(ckpt, model, data.vocab)
    held = [r for r in history if r["split"] == "heldout"]
    print(f"held-out loss per window {held[-1]['mean_loss']:.3f}")
    return [ckpt, hist_path]


def cmd_train_attn(cfg, out, args):
    data = P.lm_corpus(cfg)
    path = Path(args.checkpoint) if args.checkpoint else out / "lm.ckpt.json"
    if not path.is_file():
        raise P.ConfigError(f"checkpoint {path} not found; run train-lm first")
    model, _, _ = P.load_lm(path)
    net, history = P.train_attention(cfg, model, data.train)
    ckpt = out / "attn.ckpt.json"
    P.save_lm(ckpt, model, data.vocab, net)
    hist = _jsonl(history, out / "attn_history.jsonl")
    rate = attnpolicy.mean_fixation_rate(model, net, data.heldout, P.stage_rng(cfg, "evaluate"))
    print(f"held-out fixation rate {rate:.3f}")
    return [ckpt, hist]


def cmd_train_qa(cfg, out, args):
    train, test = P.qa_corpus(cfg)
    head, kept, head_hist = P.train_qa_head(cfg, train)
    scaler = neatqa.fit_feature_scaler(kept)
    attn, pol_hist = P.train_qa_policy(cfg, head, kept, scaler=scaler)
    ckpt = out / "qa.ckpt.json"
    P.save_qa(ckpt, head, attn, train, scaler)
    hist = _jsonl(head_hist + pol_hist, out / "qa_history.jsonl")
    rng = P.stage_rng(cfg, "evaluate")
    samples = int(cfg["qa_policy"]["eval_samples"])
    metrics = {"full_attention_accuracy": float(neatqa.full_attention_accuracy(head, test).mean()),
               "kept_train_examples": len(kept), "conditions": {}}
    files = [ckpt, hist]
    for name, code in neatqa.CONDITIONS.items():
        res = neatqa.evaluate_policy(attn, head, test, code, rng, samples)
        res["random_skip_accuracy"] = neatqa.random_skip_accuracy(
            head, test, res["fixation_rate"], rng, samples)
        metrics["conditions"][name] = {k: float(v) for k, v in res.items()}
        batch = test.batch([0])
        ro = neatqa.qa_rollout(attn, head.emb, batch, code, rng)
        files.append(evalharness.emit_heatmap(test.examples[0].text, ro.probs[0],
                                              out / f"qa_heatmap_{name}.html", lower=0.3))
        print(f"{name}: fixation rate {res['fixation_rate']:.3f} accuracy {res['accuracy']:.3f} "
              f"(random skipping {res['random_skip_accuracy']:.3f})")
    files.append(P.write_json(metrics, out / "qa_metrics.json"))
    return files


def cmd_sweep_alpha(cfg, out, args):
    train, test = P.qa_corpus(cfg)
    head, kept, _ = P.train_qa_head(cfg, train)

    def report(cell):
        for p in cell:
            print(f"alpha {p.alpha:g} run {p.run} {p.condition}: rate {p.fixation_rate:.3f} "
                  f"accuracy {p.accuracy:.3f}{' FAILED ' + p.error if p.error else ''}")

    points = P.run_sweep(cfg, head, kept, test, on_point=report)
    path = out / "sweep.csv"
    neatqa.write_sweep_csv(points, path)
    return [path]


def cmd_simulate(cfg, out, args):
    data = P.lm_corpus(cfg)
    model, _, net = P.load_lm(_lm_checkpoint(args, out))
    if net is None:
        raise P.ConfigError("checkpoint holds no attention parameters")
    records, ro = P.simulate_records(model, net, data, P.stage_rng(cfg, "simulate"))
    path = out / "simulation.jsonl"
    attnpolicy.write_simulation_jsonl(records, path)
    files = [path]
    for b in range(min(int(cfg["simulate"]["heatmaps"]), len(ro.probs))):
        toks = data.vocab.decode(data.heldout[b])
        files.append(evalharness.emit_heatmap(toks, ro.probs[b], out / f"heatmap_{b:02d}.html"))
    if data.tags is not None:
        tags = [data.tags[doc][start + i] for doc, start in data.heldout_provenance()
                for i in range(data.heldout.shape[1])]
        table = evalharness.pos_fixation_table(ro.probs.ravel(), tags)
        files.append(P.write_json(table, out / "pos_table.json"))
    print(f"simulated {len(records)} tokens, mean fixation probability {ro.probs.mean():.3f}")
    return files


def read_predictions(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def cmd_evaluate(cfg, out, args):
    c = cfg["evaluate"]
    if not c.get("gold"):
        raise P.ConfigError("[evaluate] gold must name a gold fixations CSV")
    gold = evalharness.read_gold_csv(c["gold"])
    pred_path = c.get("predictions") or str(out / "simulation.jsonl")
    preds = {(r["doc"], r["position"]): r["prob"] for r in read_predictions(pred_path)}
    missing = [(g["doc"], g["position"]) for g in gold if (g["doc"], g["position"]) not in preds]
    if missing:
        raise evalharness.EvaluationError(f"no prediction for gold token {missing[0]}")
    probs = [preds[(g["doc"], g["position"])] for g in gold]
    docs = list(dict.fromkeys(g["doc"] for g in gold))
    dev = [d.strip() for d in c.get("dev_docs", "").split(",") if d.strip()] or docs[:1]
    counts = {}
    for g in gold:
        counts[g["token"]] = counts.get(g["token"], 0) + 1
    report = evalharness.evaluate_predictions(gold, probs, set(dev), vocab_counts=counts,
                                              rng=P.stage_rng(cfg, "evaluate"),
                                              window=int(c["window"]), edge=int(c["edge"]))
    test_docs = [d for d in docs if d not in dev]
    seqs = [[g["fixated"] for g in gold if g["doc"] == d] for d in test_docs]
    report["conditional_ratio_gold"] = evalharness.conditional_ratio(seqs)
    report["reference"] = evalharness.REFERENCE
    path = P.write_json(report, out / "metrics.json")
    n = report["neat"]
    print(f"accuracy {n['accuracy']:.1f} F_fix {n['f_fix']:.1f} F_skip {n['f_skip']:.1f} "
          f"perplexity {n['perplexity']:.3f}")
    return [path]


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def cmd_etk(cfg, out, args):
    c = cfg["etk"]
    if not c.get("fixations") or not c.get("regions"):
        raise P.ConfigError("[etk] fixations and regions must name CSV files")
    fixations = etk.read_fixations_csv(c["fixations"])
    regions = etk.read_regions_csv(c["regions"])
    line_h = float(c["line_height"])
    lines = _floats(c["lines"])
    if not lines:
        raise P.ConfigError("[etk] lines must list line y-centres")
    pooled = etk.pool_fixations(fixations, float(c["char_width"]))
    files, corrected = [], []
    diag = {}
    for trial in dict.fromkeys(f.trial for f in pooled):
        fx = [f for f in pooled if f.trial == trial]
        if cfg.getboolean("etk", "drift"):
            xs, ys = _floats(c["grid_xs"]), _floats(c["grid_ys"])
            if len(xs) != 3 or len(ys) != 3:
                raise P.ConfigError("[etk] grid_xs and grid_ys need three values each")
            coef = etk.DriftCoefficients(*(float(c[f"c{k}"]) for k in range(1, 6)))
            res = etk.drift_correct(fx, etk.CalibrationGrid(tuple(xs), tuple(ys)), lines,
                                    line_h, coef)
            fx = res.fixations
            diag[trial] = {"offsets": res.offsets.tolist(), "objective": res.objective,
                           "initial_objective": res.initial_objective,
                           "converged": res.converged}
        corrected.extend(fx)
        assign = etk.assign_regions(fx, regions, lines, line_h)
        measures = etk.compute_measures(fx, regions, assign)
        path = out / f"measures_{trial}.csv"
        etk.write_measures_csv(measures, path, trial)
        files.append(path)
    fpath = out / "fixations_corrected.csv"
    etk.write_fixations_csv(corrected, fpath)
    files.append(fpath)
    files.append(P.write_json(diag, out / "drift.json"))
    print(f"{len(fixations)} raw fixations, {len(pooled)} after pooling")
    return files


def read_measures(path):
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            cell = lambda v: float(v) if v != "" else None
            out[(r["trial"], int(r["word"]))] = {
                "FirstFixation": cell(r["first_fixation"]), "FirstPass": cell(r["first_pass"]),
                "TotalTime": cell(r["total_time"]), "Fixated": int(r["fixated"])}
    return out


def cmd_export(cfg, out, args):
    data = P.lm_corpus(cfg)
    model, vocab, net = P.load_lm(_lm_checkpoint(args, out))
    records, ro = P.simulate_records(model, net, data, P.stage_rng(cfg, "simulate"))
    windows = data.heldout
    full = P.full_surprisal(model, windows)
    restricted = ro.surprisal
    docs = [r[0] for r in records]
    positions = [r[1] for r in records]
    tokens = [r[2] for r in records]
    gold = read_measures(cfg["export"]["gold_measures"]) if cfg["export"].get("gold_measures") else None
    rows = evalharness.analysis_rows(docs, tokens, positions, vocab=vocab,
                                     full_surprisal=full.ravel(),
                                     restricted_surprisal=restricted.ravel(),
                                     fixation_probs=ro.probs.ravel(), gold=gold)
    path = out / "analysis.csv"
    evalharness.export_analysis_table(rows, path)
    print(f"exported {len(rows)} rows")
    return [path]


COMMANDS = {
    "preprocess": (cmd_preprocess, "build vocabulary, LM windows and QA splits"),
    "train-lm": (cmd_train_lm, "train the reader/decoder under random skipping"),
    "train-attn": (cmd_train_attn, "train the Study-1 attention policy"),
    "train-qa": (cmd_train_qa, "train the QA head, then its attention policy"),
    "sweep-alpha": (cmd_sweep_alpha, "QA tradeoff sweep over the alpha grid"),
    "simulate": (cmd_simulate, "fixation probabilities, heatmaps and POS table"),
    "evaluate": (cmd_evaluate, "score simulated fixations against gold data"),
    "etk": (cmd_etk, "pool fixations, correct drift and compute region measures"),
    "export": (cmd_export, "per-token analysis table"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="neatread", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, text) in COMMANDS.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", help="INI file layered over the desk profile")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="override one config value")
        p.add_argument("--out", help="output directory (default: [run] out_dir)")
        p.add_argument("--checkpoint", help="model checkpoint to load instead of the default")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = P.load_config(args.config, args.overrides)
    except P.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = P.out_dir(cfg, args.out)
    fn = COMMANDS[args.command][0]
    try:
        files = fn(cfg, out, args)
    except (P.ConfigError, corpus.EmptyCorpusError, corpus.MalformedRecordError) as exc:
        P.write_manifest(out, args.command, cfg, [], partial=True, error=str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (evalharness.EvaluationError, nn.NumericError, ValueError) as exc:
        P.write_manifest(out, args.command, cfg, [], partial=True, error=str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return 1
    P.write_manifest(out, args.command, cfg, _outputs(files, out))
    return 0


if __name__ == "__main__":
    sys.exit(main())
