"""Command-line entry point: train, synth, decode, score, gradcheck, ablate, rerun.

Exit codes: 0 success, 2 usage, 3 invalid input or configuration,
4 numerical failure (divergence or a failed gradient check).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, TrainConfig, load_config, parse_config, toy_config
from .conformer import DecoderOnlyConformer, count_parameters
from .decoder import corpus_wer, decode_corpus, edit_distance
from .frontend import Vocab
from .io import FormatError, load_checkpoint, read_features, read_tokens, write_features
from .moe import usage_entropy
from .objectives import objectives_for
from .tensor import NumericalError, grad_check, no_grad
from . import trainer

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3, 4
GRADCHECK_TOL = 1e-4
ROUTER_STD = 0.3  # gradient-check routers: ties broken, no expert weight near zero


class UsageError(Exception):
    pass


def _write_manifest(out: Path, command: str, argv, cfg: TrainConfig | None, artifacts: dict, inputs_hash: str):
    manifest = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "config": None if cfg is None else cfg.to_dict(),
        "config_text": None if cfg is None else cfg.dumps(),
        "fingerprint": None if cfg is None else cfg.fingerprint(),
        "seed": None if cfg is None else cfg.seed,
        "artifacts": artifacts,
        "inputs_hash": inputs_hash,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _hash_strings(*parts: str) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p.encode())
        h.update(b"\0")
    return h.hexdigest()


def _resolve_config(path, seed=None, **overrides) -> TrainConfig:
    return load_config(path, seed=seed, **overrides)


# train -------------------------------------------------------------------

def _run_train(cfg: TrainConfig, out: Path, argv, max_steps=None, quiet=False) -> int:
    log = None if quiet else (lambda m: print(m, file=sys.stderr))
    train_data = trainer.make_dataset(cfg, "train")
    dev_data = trainer.make_dataset(cfg, "dev")
    result = trainer.train(cfg, out, train_data, dev_data, max_steps=max_steps, log=log)
    summary = {"steps": result.steps, "skipped": result.skipped}
    if dev_data:
        final = trainer.evaluate(result.model, dev_data)
        summary.update({f"dev_{k}": v for k, v in final.items()})
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    artifacts = {"metrics": "metrics.jsonl", "final": "final.ckpt", "summary": "summary.json",
                 "checkpoints": sorted(p.name for p in out.glob("epoch*.ckpt"))}
    data_hash = trainer.dataset_hash(train_data)
    _write_manifest(out, "train", argv, cfg, artifacts, _hash_strings(cfg.fingerprint(), data_hash))
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = {"seed": args.seed, "epochs": args.epochs}
    cfg = _resolve_config(args.config, **overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    argv = ["train", str(args.config), "--out", str(out)]
    return _run_train(cfg, out, argv + _extra(args), args.max_steps, args.quiet)


def _extra(args) -> list[str]:
    out = []
    for flag in ("seed", "epochs", "max_steps"):
        v = getattr(args, flag, None)
        if v is not None:
            out += [f"--{flag.replace('_', '-')}", str(v)]
    return out


def cmd_rerun(args) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    if manifest.get("command") != "train":
        raise UsageError(f"can only rerun train manifests, got {manifest.get('command')!r}")
    cfg = parse_config(manifest["config_text"])
    if cfg.fingerprint() != manifest["fingerprint"]:
        raise ConfigError("manifest fingerprint does not match its config")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    argv = manifest["argv"]
    max_steps = int(argv[argv.index("--max-steps") + 1]) if "--max-steps" in argv else None
    return _run_train(cfg, out, argv, max_steps, args.quiet)


# synth -------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _resolve_config(args.config, seed=args.seed)
    samples = trainer.make_dataset(cfg, args.split)
    if args.count is not None:
        samples = samples[: args.count]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab = Vocab(cfg.vocab_size)
    refs = []
    for i, s in enumerate(samples):
        write_features(out / f"utt{i:05d}.feat", s.features, s.tokens)
        refs.append(" ".join(vocab.to_words(s.symbols)))
    (out / "refs.txt").write_text("".join(r + "\n" for r in refs))
    _write_manifest(out, "synth", ["synth", str(args.config), "--split", args.split, "--out", str(out)],
                    cfg, {"refs": "refs.txt", "count": len(samples)}, trainer.dataset_hash(samples))
    print(f"wrote {len(samples)} utterances to {out}")
    return EXIT_OK


# decode ------------------------------------------------------------------

def _feature_paths(items) -> list[Path]:
    paths = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            paths += sorted(p.glob("*.feat"))
        elif p.exists():
            paths.append(p)
        else:
            raise FileNotFoundError(f"feature path not found: {p}")
    if not paths:
        raise FileNotFoundError("no feature files given")
    return paths


def cmd_decode(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if args.config is not None:
        cfg = load_config(args.config)
        if cfg.fingerprint() != ckpt.fingerprint:
            raise ConfigError(f"config fingerprint {cfg.fingerprint()[:12]} does not match "
                              f"checkpoint {ckpt.fingerprint[:12]}")
    if args.beam < 1:
        raise UsageError("--beam must be >= 1")
    model = trainer.model_from_checkpoint(ckpt)
    paths = _feature_paths(args.features)
    feats = [read_features(p) for p in paths]
    for p, f in zip(paths, feats):
        if f.shape[1] != ckpt.config.feat_dim:
            raise FormatError(f"{p}: feature dimension {f.shape[1]} != model's {ckpt.config.feat_dim}")
    results = decode_corpus(model, feats, beam=args.beam, greedy=args.greedy)
    vocab = Vocab(ckpt.config.vocab_size)
    lines = [" ".join(vocab.to_words(r.tokens)) for r in results]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "hyps.txt").write_text("".join(line + "\n" for line in lines))
    with open(out / "scores.jsonl", "w") as fh:
        for p, r, line in zip(paths, results, lines):
            fh.write(json.dumps({"utt": p.stem, "tokens": [int(t) for t in r.tokens], "text": line,
                                 "score": r.score, "finished": r.finished}) + "\n")
    refs = [read_tokens(p) for p in paths]
    artifacts = {"hyps": "hyps.txt", "scores": "scores.jsonl", "features": [str(p) for p in paths]}
    h = _hash_strings(ckpt.fingerprint, *(hashlib.sha256(f.tobytes()).hexdigest() for f in feats))
    argv = ["decode", str(args.checkpoint), *map(str, args.features), "--beam", str(args.beam), "--out", str(out)]
    _write_manifest(out, "decode", argv + (["--greedy"] if args.greedy else []), ckpt.config, artifacts, h)
    if all(r is not None for r in refs):
        w = corpus_wer([r[:-1] for r in refs], [r.tokens for r in results])
        print(f"decoded {len(results)} utterances; WER against sidecar tokens {w:.4f}")
    else:
        print(f"decoded {len(results)} utterances")
    return EXIT_OK


# score -------------------------------------------------------------------

def score_lines(ref_lines, hyp_lines) -> dict:
    if len(ref_lines) != len(hyp_lines):
        raise ValueError(f"utterance count mismatch: {len(ref_lines)} references vs {len(hyp_lines)} hypotheses")
    per = []
    errors = words = 0
    for i, (r, h) in enumerate(zip(ref_lines, hyp_lines)):
        rw, hw = r.split(), h.split()
        if not rw:
            raise ValueError(f"reference line {i + 1} is empty")
        e = edit_distance(rw, hw)
        per.append({"utt": i + 1, "errors": e, "ref_words": len(rw), "wer": e / len(rw)})
        errors += e
        words += len(rw)
    if not per:
        raise ValueError("no utterances to score")
    return {"wer": errors / words, "errors": errors, "ref_words": words, "utterances": per}


def _read_lines(path) -> list[str]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"file not found: {p}")
    return p.read_text().splitlines()


def cmd_score(args) -> int:
    report = score_lines(_read_lines(args.ref), _read_lines(args.hyp))
    if args.json:
        print(json.dumps(report, indent=2))
    else:
        for u in report["utterances"]:
            print(f"utt {u['utt']:>5}  errors {u['errors']:>3} / {u['ref_words']:<3}  wer {u['wer']:.4f}")
        print(f"corpus WER {report['wer']:.6f} ({report['errors']}/{report['ref_words']})")
    return EXIT_OK


# gradcheck ---------------------------------------------------------------

def gradcheck_model(cfg: TrainConfig, n_samples: int = 200, seed: int = 0, eps: float = 1e-5) -> dict:
    """Finite-difference check of the full objective on a two-utterance padded batch.

    Forces 64-bit precision and disables every stochastic component. Router
    weights are randomized first: at the uniform initial routing, top-k
    selection sits exactly on ties, where it is not differentiable.
    """
    cfg = cfg.replace(precision="float64", dropout=0.0, word_dropout=0.0,
                      specaug_freq_masks=0, specaug_time_masks=0)
    model = DecoderOnlyConformer(cfg, seed=seed)
    rng = np.random.default_rng(seed + 7)
    for name, p in model.named_parameters():
        if ".router.w" in name:
            p.data[...] = rng.normal(0.0, ROUTER_STD, p.shape)
    # full-scale heads: the shrunken training init scales every gradient down
    # towards the finite-difference rounding floor
    for head in (model.text_head, model.ctc_head):
        head.w.data *= 10.0
    samples = [
        trainer.generate_synthetic((seed, 9, 0), 2, cfg.vocab_size, 4, 0.5, cfg.feat_dim),
        trainer.generate_synthetic((seed, 9, 1), 3, cfg.vocab_size, 4, 0.5, cfg.feat_dim),
    ]
    batch = trainer.collate(samples)
    params = model.parameters()
    for name, p in model.named_parameters():
        p.name = name

    def loss():
        model.zero_grad()
        return objectives_for(model, batch)[0].total

    return grad_check(loss, params, eps=eps, n_samples=n_samples, rng=np.random.default_rng(seed),
                      oracle_dtype=np.longdouble)


def cmd_gradcheck(args) -> int:
    if args.samples < 200:
        raise UsageError("--samples must be >= 200")
    modes = args.mode.split(",")
    worst_all = 0.0
    for mode in modes:
        if args.config is not None:
            cfg = load_config(args.config).replace(moe_mode=mode)
        else:
            cfg = toy_config(mode)
        rep = gradcheck_model(cfg, args.samples, args.seed)
        worst = max(rep["coords"], key=lambda r: r["rel_err"])
        status = "PASS" if rep["max_rel_err"] <= GRADCHECK_TOL else "FAIL"
        print(f"{status} {mode}: max relative error {rep['max_rel_err']:.3e} over {rep['n_coords']} coordinates "
              f"(worst {worst['param']}[{worst['index']}]: analytic {worst['analytic']:.6e}, "
              f"numeric {worst['numeric']:.6e})")
        worst_all = max(worst_all, rep["max_rel_err"])
    return EXIT_OK if worst_all <= GRADCHECK_TOL else EXIT_NUMERICAL


# ablate ------------------------------------------------------------------

def routing_entropy(model: DecoderOnlyConformer, samples) -> float | None:
    """Mean entropy of per-layer, per-pool expert load on ``samples`` (None for dense)."""
    if model.cfg.moe_mode == "dense":
        return None
    model.eval()
    with no_grad():
        _, out = objectives_for(model, trainer.collate(samples))
    ents = [usage_entropy(st.load) for rec in out.records if rec is not None
            for st in rec.pools.values() if st.n_tokens]
    return float(np.mean(ents))


def run_ablation(base: TrainConfig, modes, out: Path | None = None, max_steps=None, beam: int | None = None,
                 log=None) -> dict:
    train_data = trainer.make_dataset(base, "train")
    dev_data = trainer.make_dataset(base, "dev")
    data_hash = _hash_strings(trainer.dataset_hash(train_data), trainer.dataset_hash(dev_data))
    rows = []
    for mode in modes:
        cfg = base.replace(moe_mode=mode)
        mode_dir = None if out is None else out / mode
        res = trainer.train(cfg, mode_dir, train_data, dev_data, max_steps=max_steps, evaluate_dev=False, log=log)
        ev = trainer.evaluate(res.model, dev_data)
        if beam is not None:
            hyps = decode_corpus(res.model, [s.features for s in dev_data], beam=beam)
            ev["wer"] = corpus_wer([list(s.symbols) for s in dev_data], [h.tokens for h in hyps])
        counts = count_parameters(res.model)
        rows.append({"mode": mode, "dev_loss": ev["total"], "dev_ce": ev["ce"], "wer": ev["wer"],
                     "usage_entropy": routing_entropy(res.model, dev_data[:50]),
                     "active_params": counts["active"], "total_params": counts["total"],
                     "router_params": counts["router_total"], "steps": res.steps})
    return {"data_hash": data_hash, "rows": rows}


def format_table(report: dict) -> str:
    head = f"{'mode':<14}{'dev_loss':>10}{'wer':>9}{'entropy':>9}{'active':>10}{'total':>10}"
    lines = [head, "-" * len(head)]
    for r in report["rows"]:
        ent = "-" if r["usage_entropy"] is None else f"{r['usage_entropy']:.3f}"
        lines.append(f"{r['mode']:<14}{r['dev_loss']:>10.4f}{r['wer']:>9.4f}{ent:>9}"
                     f"{r['active_params']:>10}{r['total_params']:>10}")
    lines.append(f"data hash {report['data_hash']}")
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    for m in modes:
        if m not in ("dense", "moe-single", "moe-modality"):
            raise ConfigError(f"moe_mode: unknown mode {m!r}")
    base = _resolve_config(args.config, seed=args.seed, epochs=args.epochs)
    out = None
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
    log = None if args.quiet else (lambda m: print(m, file=sys.stderr))
    report = run_ablation(base, modes, out, args.max_steps, args.beam, log)
    print(format_table(report))
    if out is not None:
        (out / "ablation.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        argv = ["ablate", str(args.config), "--modes", args.modes, "--out", str(out)] + _extra(args)
        _write_manifest(out, "ablate", argv, base, {"table": "ablation.json", "modes": modes},
                        _hash_strings(base.fingerprint(), report["data_hash"]))
    return EXIT_OK


# entry point -------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hybridasr", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train on the synthetic task")
    t.add_argument("config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("rerun", help="re-execute a train manifest")
    r.add_argument("manifest")
    r.add_argument("--out", required=True)
    r.add_argument("--quiet", action="store_true")
    r.set_defaults(func=cmd_rerun)

    s = sub.add_parser("synth", help="write synthetic feature files and references")
    s.add_argument("config")
    s.add_argument("--out", required=True)
    s.add_argument("--split", choices=("train", "dev"), default="dev")
    s.add_argument("--count", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    d = sub.add_parser("decode", help="beam-decode feature files")
    d.add_argument("checkpoint")
    d.add_argument("features", nargs="+", help="feature files or directories of *.feat")
    d.add_argument("--out", required=True)
    d.add_argument("--beam", type=int, default=4)
    d.add_argument("--greedy", action="store_true", help="plain argmax decoding (debug reference)")
    d.add_argument("--config", help="refuse to decode unless this config matches the checkpoint")
    d.set_defaults(func=cmd_decode)

    c = sub.add_parser("score", help="word error rate of hypotheses against references")
    c.add_argument("ref")
    c.add_argument("hyp")
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_score)

    g = sub.add_parser("gradcheck", help="finite-difference gradient check (64-bit)")
    g.add_argument("--config", help="base config (default: built-in two-layer toy config)")
    g.add_argument("--mode", default="dense,moe-single,moe-modality")
    g.add_argument("--samples", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train several modes on shared data and compare")
    a.add_argument("config")
    a.add_argument("--modes", default="dense,moe-single,moe-modality")
    a.add_argument("--out")
    a.add_argument("--seed", type=int)
    a.add_argument("--epochs", type=int)
    a.add_argument("--max-steps", type=int)
    a.add_argument("--beam", type=int, help="score WER with beam search instead of greedy")
    a.add_argument("--quiet", action="store_true")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, FormatError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    raise SystemExit(main())
