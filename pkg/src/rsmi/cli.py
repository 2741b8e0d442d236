"""Command-line entry point: ``rsmi <command> [options]``.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .attacks import AttackConfig, run_campaign, write_records
from .config import ConfigError, RunConfig
from .estimator import RSMIClassifier, baseline_classifier
from .nn import CheckpointError
from .numerics import RadiusInput, certified_radius, layer_factors
from .textdata import (SynonymTable, Vocabulary, gen_synthetic, load_tsv, save_tsv)

logger = logging.getLogger("rsmi")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- data and model wiring ---------------------------------------------------------------

class Dataset:
    def __init__(self, train, test, vocab, synonyms):
        self.train, self.test, self.vocab, self.synonyms = train, test, vocab, synonyms


def load_data(cfg: RunConfig) -> Dataset:
    d = cfg.data
    if d.synthetic:
        c = gen_synthetic(d.data_seed, d.n_train, d.n_test, d.vocab_size, d.class_count)
        return Dataset(c.train, c.test, c.vocab, c.synonyms)
    vocab = Vocabulary.load(d.vocab_path)
    train = load_tsv(d.train_path, vocab, cfg.model.max_len)
    test = load_tsv(d.test_path, vocab, cfg.model.max_len) if d.test_path else train
    synonyms = SynonymTable()
    if d.synonyms_path:
        synonyms = SynonymTable.from_tsv(Path(d.synonyms_path).read_text(encoding="utf-8"), vocab)
    return Dataset(train, test, vocab, synonyms)


def build_classifier(cfg: RunConfig, data: Dataset, baseline: bool = False, seed=None,
                     **overrides) -> RSMIClassifier:
    m, t, i = cfg.model, cfg.train, cfg.infer
    n_classes = max(max(e.label for e in data.train), max(e.label for e in data.test)) + 1
    kw = dict(d_model=m.d_model, n_blocks=m.n_blocks, d_ff=m.d_ff, max_len=m.max_len,
              sigma=m.sigma, n_noise_layers=m.n_noise_layers, noise_sites=m.noise_sites,
              M=t.M, N=i.N, nu=t.nu, beta=t.beta, lr=t.lr, weight_decay=t.weight_decay,
              epochs=t.epochs, batch_size=t.batch_size, k0=i.k0, k1=i.k1, alpha=i.alpha,
              inference=i.mode, mask_strategy=t.mask_strategy, normalize_grad=t.normalize_grad,
              vocab_size=len(data.vocab), n_classes=n_classes, dtype=m.dtype,
              random_state=cfg.seed if seed is None else seed)
    kw.update(overrides)
    if baseline:
        kw.update(sigma=0.0, M=0, beta=0.0, inference="plain")
        return baseline_classifier(**kw)
    return RSMIClassifier(**kw)


def fit(clf: RSMIClassifier, examples) -> RSMIClassifier:
    return clf.fit([e.tokens for e in examples], [e.label for e in examples])


def attack_config(cfg: RunConfig, data: Dataset) -> AttackConfig:
    a = cfg.attack
    return AttackConfig(strategy=a.strategy, synonyms=data.synonyms,
                        max_candidates=a.max_candidates, budget=a.budget)


def campaign(cfg, data, clf, jobs, sample=None):
    return run_campaign(clf.oracle, data.test, attack_config(cfg, data), seed=cfg.seed,
                        n=sample or cfg.attack.sample, jobs=jobs)


def prepare_out(out: str, cfg: RunConfig) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.json").write_text(cfg.dumps(), encoding="utf-8")
    return path


def set_infer_mode(clf: RSMIClassifier, cfg: RunConfig, mode: str | None) -> None:
    if clf.inference == "plain":
        return
    clf.set_params(inference=(mode or cfg.infer.mode).replace("-", "_"), M=cfg.infer.M)


# -- commands --------------------------------------------------------------------------------

def cmd_train(args, cfg):
    data = load_data(cfg)
    out = prepare_out(args.out, cfg)
    clf = fit(build_classifier(cfg, data, baseline=args.baseline), data.train)
    clf.save(out / "model.rsmi", extra={"seed": cfg.seed, "baseline": bool(args.baseline)})
    with open(out / "loss.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for step, loss in enumerate(clf.loss_curve_):
            fh.write(json.dumps({"step": step, "loss": float(loss)}) + "\n")
    print(f"trained {clf.n_iter_} steps, final loss {clf.loss_curve_[-1]:.4f}" if clf.loss_curve_
          else "trained 0 steps")
    return EXIT_OK


def _load_model(cfg, data, path):
    clf = build_classifier(cfg, data)
    clf.load(path)
    if clf.config_.vocab_size != len(data.vocab):
        raise CheckpointError(f"checkpoint vocab_size {clf.config_.vocab_size} does not match "
                              f"data vocabulary of {len(data.vocab)}")
    if not clf.config_.noise_sites:
        clf.set_params(inference="plain")
    return clf


def cmd_attack(args, cfg):
    data = load_data(cfg)
    clf = _load_model(cfg, data, args.checkpoint)
    set_infer_mode(clf, cfg, args.mode)
    out = prepare_out(args.out, cfg)
    res = campaign(cfg, data, clf, args.jobs, args.sample)
    write_records(out / "records.jsonl", res.records)
    metrics = res.summary.to_dict()
    metrics.update(mode=clf.inference, strategy=cfg.attack.strategy, seed=cfg.seed,
                   forward_passes=res.forward_passes, sample=len(res.indices))
    analysis.write_json(out / "metrics.json", metrics)
    s = res.summary
    print(f"[{clf.inference}] SAcc {s.sacc:.4f} RAcc {s.racc:.4f} ASR {s.asr:.4f} "
          f"AvgQ {s.avgq_all:.1f}")
    return EXIT_OK


def cmd_certify(args, cfg):
    if not args.sigma:
        raise UsageError("--sigma needs at least one value")
    sigma_embed, layers = args.sigma[0], args.sigma[1:]
    for name, p in (("p_a", args.pa), ("p_b", args.pb)):
        if p in (0.0, 1.0):
            print(f"warning: {name}={p} clamped into [1e-9, 1-1e-9]", file=sys.stderr)
    try:
        radius = certified_radius(RadiusInput(sigma_embed, args.pa, args.pb, tuple(layers)))
    except ValueError as e:
        raise UsageError(str(e)) from None
    print(f"sigma_1 = {sigma_embed:g}  prefactor 1/(2*sigma_1) = {1 / (2 * sigma_embed):.7f}")
    for k, (s, f) in enumerate(zip(layers, layer_factors(layers)), start=2):
        print(f"layer {k}: sigma = {s:g}  factor (1+sigma^2) = {f:.7f}")
    print(f"radius = {radius:.7f}")
    return EXIT_OK


def cmd_ablate(args, cfg):
    data = load_data(cfg)
    out = prepare_out(args.out, cfg)
    models = {}

    def make_victim(kind, m, k):
        key = (kind, m)
        if key not in models:
            strategy = "gradient" if kind == "gm" else "random"
            models[key] = fit(build_classifier(cfg, data, sigma=0.0, M=m, mask_strategy=strategy),
                              data.train)
        clf = models[key]
        clf.set_params(inference=kind, M=m, rm_k=k)
        return clf

    table = analysis.ablate_rm_vs_gm(make_victim, lambda clf: campaign(cfg, data, clf, args.jobs).summary,
                                     cfg.ablate.m_values, cfg.ablate.k_values)
    rows = table.rows()
    analysis.write_csv(out / "ablation.csv", rows)
    print(analysis.to_csv(rows), end="")
    return EXIT_OK


def cmd_sweep(args, cfg):
    data = load_data(cfg)
    out = prepare_out(args.out, cfg)
    sw = cfg.sweep
    grid = [(s, m, nl) for s in sw.sigma for m in sw.M for nl in sw.n_noise_layers]

    def evaluate(sigma, m, nl):
        clf = fit(build_classifier(cfg, data, sigma=sigma, M=m, n_noise_layers=nl), data.train)
        clf.set_params(M=m)
        return campaign(cfg, data, clf, args.jobs).summary

    rows = analysis.sweep_hyperparams(grid, evaluate)
    analysis.write_csv(out / "sweep.csv", rows, analysis.SWEEP_COLUMNS)
    print(analysis.to_csv(rows, analysis.SWEEP_COLUMNS), end="")
    return EXIT_OK


def cmd_stability(args, cfg):
    data = load_data(cfg)
    clf = _load_model(cfg, data, args.checkpoint)
    set_infer_mode(clf, cfg, None)
    out = prepare_out(args.out, cfg)
    runs = args.runs or cfg.stability.runs
    examples = data.test[:cfg.stability.n_examples]
    X = [e.tokens for e in examples]
    y = [e.label for e in examples]
    rep = analysis.stability_eval(lambda X, s: clf.predict(X, s), X, y, runs, cfg.seed)
    doc = rep.to_dict()
    doc.update(seed=cfg.seed, runs=runs, n_examples=len(examples))
    analysis.write_json(out / "stability.json", doc)
    print(f"{runs} runs: mean {rep.mean:.4f} std {rep.std:.4f} min {rep.min:.4f} max {rep.max:.4f}")
    return EXIT_OK


def cmd_latent(args, cfg):
    data = load_data(cfg)
    clf = _load_model(cfg, data, args.checkpoint)
    out = prepare_out(args.out, cfg)
    if args.records:
        from .attacks import read_records
        pairs = [(r.original, r.perturbed) for r in read_records(args.records) if r.success]
    else:
        pairs = [(e.tokens, e.tokens) for e in data.test[:args.limit]]
    if not pairs:
        raise RuntimeError("no clean/adversarial pairs to compare")
    divs = [analysis.latent_divergence(clf.params_, clf.config_, a, b, cfg.seed) for a, b in pairs]
    layers = divs[0].layers
    rows = [{"layer": n,
             "l2": float(np.mean([d.l2[j] for d in divs])),
             "cosine": float(np.mean([d.cosine[j] for d in divs]))}
            for j, n in enumerate(layers)]
    analysis.write_csv(out / "latent.csv", rows)
    print(analysis.to_csv(rows), end="")
    return EXIT_OK


def cmd_gen_data(args, cfg):
    d = cfg.data
    out = prepare_out(args.out, cfg)
    c = gen_synthetic(d.data_seed, d.n_train, d.n_test, d.vocab_size, d.class_count)
    save_tsv(out / "train.tsv", c.train, c.vocab)
    save_tsv(out / "test.tsv", c.test, c.vocab)
    c.vocab.save(out / "vocab.json")
    (out / "synonyms.tsv").write_text(c.synonyms.to_tsv(c.vocab), encoding="utf-8")
    print(f"wrote {len(c.train)} train / {len(c.test)} test examples to {out}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train, "attack": cmd_attack, "certify": cmd_certify, "ablate": cmd_ablate,
    "sweep": cmd_sweep, "stability": cmd_stability, "latent": cmd_latent, "gen-data": cmd_gen_data,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults are used when omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", default="runs/out", help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="concurrent example-level workers")

    p = _Parser(prog="rsmi", description="Noise-smoothed masked-inference text classifier toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--baseline", action="store_true", help="train without noise, masking or perturbation")

    a = sub.add_parser("attack", parents=[common], help="attack a trained model")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--mode", choices=["logit-average", "majority"])
    a.add_argument("--sample", type=int)

    c = sub.add_parser("certify", parents=[common], help="certified L2 radius")
    c.add_argument("--pa", type=float, required=True)
    c.add_argument("--pb", type=float, required=True)
    c.add_argument("--sigma", type=float, nargs="+", required=True,
                   help="embedding sigma followed by any further layer sigmas")

    sub.add_parser("ablate", parents=[common], help="random vs gradient-guided masking table")
    sub.add_parser("sweep", parents=[common], help="sigma / M / noise-layer grid")

    s = sub.add_parser("stability", parents=[common], help="repeated stochastic inference")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--runs", type=int)

    lt = sub.add_parser("latent", parents=[common], help="per-layer clean vs adversarial divergence")
    lt.add_argument("--checkpoint", required=True)
    lt.add_argument("--records", help="attack records.jsonl; successful pairs are compared")
    lt.add_argument("--limit", type=int, default=50, help="clean examples when no records are given")

    sub.add_parser("gen-data", parents=[common], help="write the synthetic corpus as TSV/JSON")
    return p


def _configure_logging():
    level = os.environ.get("RSMI_LOG", "error").lower()
    if level not in LOG_LEVELS:
        raise ConfigError(f"RSMI_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    try:
        _configure_logging()
        args = build_parser().parse_args(argv)
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg.seed = args.seed
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
    except (UsageError, ConfigError) as e:
        print(f"rsmi: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TypeError as e:  # dataclass rejected a field type
        print(f"rsmi: error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as e:
        print(f"rsmi: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, OSError, ValueError, RuntimeError, FloatingPointError) as e:
        print(f"rsmi: runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
