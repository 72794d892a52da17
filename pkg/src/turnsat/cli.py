"""Command-line harness tying generation, training, evaluation, sweeps,
and plotting together.

Subcommands: gen-data, train, eval, sweep, plot. Exit codes: 0 success,
2 usage/config error, 1 runtime failure. Sweep results accumulate in a
single resumable CSV; the summary CSV and the SVG charts are rendered
alongside it.
"""

from __future__ import annotations

import argparse
import fcntl
import hashlib
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import metrics as mt
from . import model as mod
from . import train as tr
from .config import ExperimentConfig, canonical_text, config_hash, effective_epochs, parse_config
from .data import (
    DSAT,
    ConfigError,
    DatasetSplits,
    build_splits,
    build_vocab,
    generate_corpus,
    load_sessions,
    load_vocab,
    save_sessions,
    save_vocab,
    validate_splits,
)

RESULT_HEADER = "method,n_labeled,seed,split,auc_pr,auc_roc,error"
SUMMARY_HEADER = ("method,n_labeled,split,mean_auc_pr,std_auc_pr,"
                  "mean_auc_roc,std_auc_roc,n_seeds")


def data_hash(cfg: ExperimentConfig) -> str:
    """Hash of the keys that determine the on-disk corpus and splits."""
    lines = [ln for ln in canonical_text(cfg).splitlines()
             if ln.startswith(("gen.", "split."))]
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]


def corpus_paths(out_dir: str) -> dict:
    return {
        "labeled": os.path.join(out_dir, "labeled.jsonl"),
        "unlabeled": os.path.join(out_dir, "unlabeled.jsonl"),
        "vocab": os.path.join(out_dir, "vocab.json"),
        "manifest": os.path.join(out_dir, "splits.json"),
    }


def cmd_gen_data(cfg: ExperimentConfig) -> dict:
    """Write the corpora, vocabulary, and split manifest; idempotent for a
    fixed seed."""
    paths = corpus_paths(cfg.out_dir)
    try:
        os.makedirs(cfg.out_dir, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output dir {cfg.out_dir}: {e}")
    vocab = build_vocab(cfg.gen)
    labeled, unlabeled = generate_corpus(cfg.gen)
    splits = build_splits(
        labeled, unlabeled,
        fractions=(cfg.train_fraction, cfg.val_fraction),
        out_of_domain_skill_fraction=cfg.out_of_domain_skill_fraction,
        seed=cfg.split_seed,
        low_freq_max_sessions=cfg.low_freq_max_sessions,
    )
    save_sessions(paths["labeled"], labeled)
    save_sessions(paths["unlabeled"], unlabeled)
    save_vocab(paths["vocab"], vocab)
    lab_index = {id(s): i for i, s in enumerate(labeled)}
    unl_index = {id(s): i for i, s in enumerate(unlabeled)}
    manifest = {"data_hash": data_hash(cfg)}
    for name in ("train", "validation", "test_in_domain", "test_out_of_domain"):
        manifest[name] = [lab_index[id(s)] for s in getattr(splits, name)]
    for name in ("unsup_train", "unsup_validation"):
        manifest[name] = [unl_index[id(s)] for s in getattr(splits, name)]
    with open(paths["manifest"], "w") as fh:
        json.dump(manifest, fh, sort_keys=True, separators=(",", ":"))
    return paths


def load_corpus(cfg: ExperimentConfig) -> tuple[DatasetSplits, dict]:
    paths = corpus_paths(cfg.out_dir)
    for p in paths.values():
        if not os.path.exists(p):
            raise ConfigError(f"missing corpus file {p}; run gen-data first")
    vocab = load_vocab(paths["vocab"])
    labeled = load_sessions(paths["labeled"], vocab)
    unlabeled = load_sessions(paths["unlabeled"], vocab)
    with open(paths["manifest"]) as fh:
        manifest = json.load(fh)
    if manifest.get("data_hash") != data_hash(cfg):
        raise ConfigError(
            "corpus on disk was generated with different gen/split settings; "
            "rerun gen-data"
        )
    parts = {}
    for name in ("train", "validation", "test_in_domain", "test_out_of_domain"):
        parts[name] = [labeled[i] for i in manifest[name]]
    for name in ("unsup_train", "unsup_validation"):
        parts[name] = [unlabeled[i] for i in manifest[name]]
    splits = DatasetSplits(**parts)
    validate_splits(splits)
    return splits, vocab


def subsample_train(train, n: int, seed: int):
    """Label-stratified subsample of the training sessions."""
    if n > len(train):
        raise ConfigError(f"n_labeled {n} exceeds available train sessions {len(train)}")
    rng = np.random.default_rng(tr.derived_seed(seed, "subsample", n))
    pos = [s for s in train if s.label == DSAT]
    neg = [s for s in train if s.label != DSAT]
    if not pos or not neg:
        idx = rng.choice(len(train), size=n, replace=False)
        return [train[i] for i in sorted(idx)]
    n_pos = min(max(int(round(n * len(pos) / len(train))), 1), len(pos), n - 1)
    n_neg = n - n_pos
    if n_neg > len(neg):
        n_neg = len(neg)
        n_pos = n - n_neg
    pi = rng.choice(len(pos), size=n_pos, replace=False)
    ni = rng.choice(len(neg), size=n_neg, replace=False)
    return [pos[i] for i in sorted(pi)] + [neg[i] for i in sorted(ni)]


def _model_cfg(cfg: ExperimentConfig, vocab: dict, seed: int) -> mod.ModelConfig:
    return replace(cfg.model, vocab_size=len(vocab), seed=tr.derived_seed(seed, "init"))


def _cell_tag(method: str, n: int, seed: int) -> str:
    return f"{method}_n{n}_s{seed}"


def pretrained_for_seed(cfg: ExperimentConfig, splits, vocab, seed: int) -> mod.ParamSet:
    """Contrastive pretraining is cached per seed; it does not depend on
    n_labeled."""
    path = os.path.join(cfg.out_dir, f"pretrain_s{seed}")
    model_cfg = _model_cfg(cfg, vocab, seed)
    expect = mod.init_params(model_cfg)
    if os.path.exists(os.path.join(path, "manifest.txt")):
        return mod.load_checkpoint(path, expect=expect)
    t_cfg = replace(cfg.train, seed=tr.derived_seed(seed, "pretrain"),
                    epochs=effective_epochs(cfg, "pretrain"))
    pretrained, report = tr.contrastive_pretrain(expect, splits, t_cfg)
    mod.save_checkpoint(pretrained, path)
    _write_report(cfg, os.path.join(cfg.out_dir, f"pretrain_s{seed}_report.json"), report)
    return pretrained


def _write_report(cfg: ExperimentConfig, path: str, report: tr.TrainReport) -> None:
    payload = report.to_dict()
    payload["config_hash"] = config_hash(cfg)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)


def run_cell(cfg: ExperimentConfig, splits, vocab, method: str, n: int, seed: int):
    """Train one sweep cell and evaluate it on both test splits."""
    subset = subsample_train(splits.train, n, seed)
    model_cfg = _model_cfg(cfg, vocab, seed)
    t_cfg = replace(cfg.train, seed=tr.derived_seed(seed, "train"))
    if method == "supervised":
        final, report = tr.supervised_train(mod.init_params(model_cfg), splits,
                                            t_cfg, train_subset=subset)
    elif method == "pretrain_finetune":
        pretrained = pretrained_for_seed(cfg, splits, vocab, seed)
        final, report = tr.finetune(pretrained, splits, t_cfg, train_subset=subset)
    elif method == "few_shot":
        fs_cfg = replace(t_cfg, epochs=effective_epochs(cfg, "few_shot"),
                         finetune_epochs=cfg.train.epochs)
        final, report = tr.few_shot_train(mod.init_params(model_cfg), splits,
                                          fs_cfg, t_train=subset)
    else:
        raise ConfigError(f"unknown method {method!r}")
    records = mt.evaluate(final, splits, method=method, n_labeled=n, seed=seed)
    return final, report, records


def cmd_train(cfg: ExperimentConfig, method: str, n: int, seed: int) -> dict:
    splits, vocab = load_corpus(cfg)
    final, report, records = run_cell(cfg, splits, vocab, method, n, seed)
    tag = _cell_tag(method, n, seed)
    ckpt = os.path.join(cfg.out_dir, f"ckpt_{tag}")
    mod.save_checkpoint(final, ckpt)
    report_path = os.path.join(cfg.out_dir, f"report_{tag}.json")
    _write_report(cfg, report_path, report)
    return {"checkpoint": ckpt, "report": report_path, "records": records}


def cmd_eval(cfg: ExperimentConfig, method: str, n: int, seed: int) -> list[mt.EvalRecord]:
    splits, vocab = load_corpus(cfg)
    tag = _cell_tag(method, n, seed)
    ckpt = os.path.join(cfg.out_dir, f"ckpt_{tag}")
    if not os.path.exists(os.path.join(ckpt, "manifest.txt")):
        raise FileNotFoundError(f"no checkpoint at {ckpt}; run train first")
    params = mod.load_checkpoint(ckpt, expect=mod.init_params(_model_cfg(cfg, vocab, seed)))
    records = mt.evaluate(params, splits, method=method, n_labeled=n, seed=seed)
    path = os.path.join(cfg.out_dir, f"eval_{tag}.csv")
    _write_results_csv(path, config_hash(cfg), [_record_row(r) for r in records])
    for r in records:
        print(f"{r.method} n={r.n_labeled} seed={r.seed} {r.split}: "
              f"auc_pr={r.auc_pr:.4f} auc_roc={r.auc_roc:.4f}")
    return records


# -- results CSV ---------------------------------------------------------------


def _fmt(x: float) -> str:
    return format(x, ".12g")


def _record_row(r: mt.EvalRecord) -> str:
    return f"{r.method},{r.n_labeled},{r.seed},{r.split},{_fmt(r.auc_pr)},{_fmt(r.auc_roc)},"


def _error_row(method, n, seed, split, message) -> str:
    clean = str(message).replace(",", ";").replace("\n", " ")[:200]
    return f"{method},{n},{seed},{split},,,{clean}"


def _write_results_csv(path: str, cfg_hash: str, rows: list[str]) -> None:
    with open(path, "w") as fh:
        fh.write(f"# config_hash={cfg_hash}\n{RESULT_HEADER}\n")
        for row in rows:
            fh.write(row + "\n")


def append_rows(path: str, cfg_hash: str, rows: list[str]) -> None:
    """Append under an advisory lock, creating the header on first write."""
    with open(path, "a+") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            fh.seek(0, os.SEEK_END)
            if fh.tell() == 0:
                fh.write(f"# config_hash={cfg_hash}\n{RESULT_HEADER}\n")
            for row in rows:
                fh.write(row + "\n")
            fh.flush()
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def read_results(path: str):
    """Returns (config_hash, row dicts) from a results CSV."""
    if not os.path.exists(path):
        return None, []
    cfg_hash = None
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                if "config_hash=" in line:
                    cfg_hash = line.split("config_hash=", 1)[1].strip()
                continue
            if line == RESULT_HEADER:
                continue
            parts = line.split(",", 6)
            if len(parts) != 7:
                continue
            rows.append(dict(zip(RESULT_HEADER.split(","), parts)))
    return cfg_hash, rows


def rows_to_records(rows) -> list[mt.EvalRecord]:
    records = []
    for r in rows:
        if r["error"] or not r["auc_pr"]:
            continue
        records.append(mt.EvalRecord(
            method=r["method"], n_labeled=int(r["n_labeled"]), seed=int(r["seed"]),
            split=r["split"], auc_roc=float(r["auc_roc"]), auc_pr=float(r["auc_pr"]),
        ))
    return records


def cmd_sweep(cfg: ExperimentConfig) -> str:
    """Run the methods x n_labeled x seeds grid, appending missing rows only."""
    splits, vocab = load_corpus(cfg)
    results_path = os.path.join(cfg.out_dir, "results.csv")
    cfg_hash = config_hash(cfg)
    prev_hash, existing = read_results(results_path)
    if existing and prev_hash != cfg_hash:
        raise ConfigError(
            f"{results_path} was produced under config {prev_hash}; "
            f"current is {cfg_hash} (move the file or align the config)"
        )
    done = {(r["method"], r["n_labeled"], r["seed"], r["split"]) for r in existing}
    for method in cfg.methods:
        for n in cfg.n_labeled_grid:
            for seed in cfg.seeds:
                missing = [s for s in ("in_domain", "out_of_domain")
                           if (method, str(n), str(seed), s) not in done]
                if not missing:
                    continue
                try:
                    _, _, records = run_cell(cfg, splits, vocab, method, n, seed)
                    rows = [_record_row(r) for r in records if r.split in missing]
                except Exception as e:  # a cell failure must not kill the sweep
                    rows = [_error_row(method, n, seed, s, e) for s in missing]
                append_rows(results_path, cfg_hash, rows)
                print(f"sweep: {method} n={n} seed={seed} done", flush=True)
    _write_summary(cfg, results_path)
    cmd_plot(cfg, results_path, cfg.out_dir)
    return results_path


def _write_summary(cfg: ExperimentConfig, results_path: str) -> str:
    _, rows = read_results(results_path)
    aggs = mt.aggregate(rows_to_records(rows))
    path = os.path.join(cfg.out_dir, "summary.csv")
    with open(path, "w") as fh:
        fh.write(f"# config_hash={config_hash(cfg)}\n{SUMMARY_HEADER}\n")
        for a in aggs:
            fh.write(
                f"{a.method},{a.n_labeled},{a.split},{_fmt(a.mean_auc_pr)},"
                f"{_fmt(a.std_auc_pr)},{_fmt(a.mean_auc_roc)},{_fmt(a.std_auc_roc)},"
                f"{a.n_seeds}\n"
            )
    return path


def cmd_plot(cfg: ExperimentConfig | None, results_path: str, out_dir: str) -> list[str]:
    from . import plots

    _, rows = read_results(results_path)
    records = rows_to_records(rows)
    if not records:
        raise ConfigError(f"no usable rows in {results_path}")
    cfg_hash = config_hash(cfg) if cfg is not None else ""
    return plots.plot_curves(records, out_dir, cfg_hash)


# -- argument parsing ------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="turnsat",
        description="synthetic turn-satisfaction benchmark: generate data, "
                    "train, evaluate, sweep, plot",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, need_cell):
        sp.add_argument("--config", required=True, help="experiment config file")
        sp.add_argument("--out", help="override exp.out_dir")
        if need_cell:
            sp.add_argument("--method", required=True,
                            choices=("supervised", "pretrain_finetune", "few_shot"))
            sp.add_argument("--n-labeled", type=int, required=True)
            sp.add_argument("--seed", type=int, required=True)

    common(sub.add_parser("gen-data", help="write corpora and split manifest"), False)
    common(sub.add_parser("train", help="train one cell, write checkpoint + report"), True)
    common(sub.add_parser("eval", help="evaluate a trained cell on both test splits"), True)
    common(sub.add_parser("sweep", help="run the full grid into results.csv"), False)
    pp = sub.add_parser("plot", help="render sample-size charts from a results CSV")
    pp.add_argument("--config", required=True)
    pp.add_argument("--results", help="results CSV (default <out_dir>/results.csv)")
    pp.add_argument("--out", help="output dir for SVGs (default <out_dir>)")
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
        if args.out:
            cfg.out_dir = args.out
        if args.command == "gen-data":
            paths = cmd_gen_data(cfg)
            print(f"wrote corpus to {cfg.out_dir} "
                  f"({os.path.basename(paths['labeled'])}, "
                  f"{os.path.basename(paths['unlabeled'])}, vocab, splits)")
        elif args.command == "train":
            out = cmd_train(cfg, args.method, args.n_labeled, args.seed)
            for r in out["records"]:
                print(f"{r.split}: auc_pr={r.auc_pr:.4f} auc_roc={r.auc_roc:.4f}")
            print(f"checkpoint: {out['checkpoint']}")
        elif args.command == "eval":
            cmd_eval(cfg, args.method, args.n_labeled, args.seed)
        elif args.command == "sweep":
            path = cmd_sweep(cfg)
            print(f"results: {path}")
        elif args.command == "plot":
            results = args.results or os.path.join(cfg.out_dir, "results.csv")
            out_dir = args.out or cfg.out_dir
            for p in cmd_plot(cfg, results, out_dir):
                print(p)
        return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
