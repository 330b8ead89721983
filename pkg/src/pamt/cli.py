"""Command-line entry point: ``pamt <subcommand> [options]``.

Exit codes: 0 success, 1 invalid configuration or input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .adversarial import FAMILIES, AttackConfig, DefenseConfig, Classifier, adversarial_train, attack_batch, dpamt_budget
from .audio import AudioClip, CorpusConfig, read_wav, synth_corpus, write_wav
from .embedding import EmbeddingSequence, get_encoder, read_embeddings, write_embeddings
from .experiments import (METRIC_ROWS, encode_dataset, judge_val_metric, metric_table, robustness_table,
                          stratified_split)
from .metrics import JudgeConfig, JudgedPair, build_judged_dataset, frechet_distance_samples, split_refs
from .pcsct import PCSCTModel, TrainConfig, audio_pair_source, derive_seed, embed_pamt, pooled_pamt, train
from .perturb import KIND_ALIASES, PARAM_RANGES, Kind, PerturbationSpec, apply, parse_kind, sample_spec

log = logging.getLogger("pamt")


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG = {
    "corpus": {"n_classes": 4, "clips_per_class": 8, "duration_s": 2.0, "sample_rate_hz": 16000,
               "note_sets_hz": None, "rolloff": []},
    "perturb": {"kinds": [k.name for k in Kind]},
    "train": {"lr": 1e-4, "weight_decay": 1e-5, "batch_size": 32, "max_epochs": 100, "warmup_frac": 0.1,
              "temperature": 0.1, "patience": 10, "encoder_seed": 0, "val_frac": 0.2},
    "eval": {"test_frac": 0.2, "judge_noise": 0.1},
    "attack": {"families": list(FAMILIES), "steps": 20, "linf_rel": 0.005, "bark_scale": 0.1,
               "eps": None, "eps_quantile": 0.25, "test_frac": 0.3,
               "defense_epochs": 300, "defense_lr": 1e-2, "defense_attack_steps": 10},
}


def load_config(path: str | None) -> dict:
    """Defaults overlaid with a JSON document; unknown sections or keys are rejected."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is None:
        return cfg
    try:
        user = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path}: invalid JSON ({exc})") from None
    if not isinstance(user, dict):
        raise ConfigError("config must be a JSON object")
    for section, values in user.items():
        if section not in cfg:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        for key, v in values.items():
            if key not in cfg[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            cfg[section][key] = v
    for k in cfg["perturb"]["kinds"]:
        try:
            parse_kind(k)
        except ValueError:
            raise ConfigError(f"perturb.kinds: unknown kind {k!r}") from None
    for f in cfg["attack"]["families"]:
        if f not in FAMILIES:
            raise ConfigError(f"attack.families: unknown family {f!r}")
    for section, key in (("eval", "test_frac"), ("attack", "test_frac"), ("train", "val_frac")):
        if not 0 < cfg[section][key] < 1:
            raise ConfigError(f"{section}.{key} must lie in (0, 1)")
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def provenance(cfg: dict, seed: int) -> list[str]:
    return [f"pamt {__version__}", f"config_sha256 {config_hash(cfg)}", f"seed {seed}"]


def write_csv(path: Path, header: list[str], rows: list[list], cfg: dict, seed: int) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for line in provenance(cfg, seed):
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def read_csv_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def _fmt(x: float) -> str:
    return repr(float(x))


# ------------------------------------------------------------------ inputs

def corpus_config(cfg: dict) -> CorpusConfig:
    c = cfg["corpus"]
    extra = {"note_sets_hz": c["note_sets_hz"]} if c["note_sets_hz"] else {}
    return CorpusConfig(n_classes=c["n_classes"], clips_per_class=c["clips_per_class"],
                        duration_s=c["duration_s"], sample_rate_hz=c["sample_rate_hz"],
                        rolloff=tuple(c["rolloff"]), **extra)


def load_corpus(args, cfg: dict) -> tuple[list[str], list[AudioClip], list[int]]:
    """Clips from ``--corpus`` (WAVs plus labels.csv) or a fresh synthetic corpus."""
    if args.corpus is None:
        data = synth_corpus(corpus_config(cfg), seed=args.seed)
        return [f"clip{i:04d}" for i in range(len(data))], [c for c, _ in data], [y for _, y in data]
    root = Path(args.corpus)
    labels_path = root / "labels.csv"
    if labels_path.exists():
        rows = read_csv_rows(labels_path)
        ids = [r["clip_id"] for r in rows]
        labels = [int(r["label"]) for r in rows]
    else:
        ids = sorted(p.stem for p in root.glob("*.wav"))
        labels = [0] * len(ids)
    if not ids:
        raise ConfigError(f"corpus {root} contains no clips")
    return ids, [read_wav(root / f"{i}.wav") for i in ids], labels


def load_model(path) -> PCSCTModel:
    if path is None:
        raise ConfigError("--model is required")
    return PCSCTModel.load(path)


def load_embeddings_dir(path) -> dict[str, np.ndarray]:
    files = sorted(Path(path).glob("*.pemb"))
    if not files:
        raise ConfigError(f"no .pemb files in {path}")
    return {f.stem: read_embeddings(f, expected_dim=768).data for f in files}


def judged_dataset(args, cfg: dict, ids, clips) -> list[JudgedPair]:
    """Synthetic-judge dataset, or human scores from ``--scores-csv``.

    The scores CSV has columns clip_id, ref_id, kind, params_json, score_2afc,
    score_mos; perturbed and reference WAVs are read from ``--corpus``.
    """
    if args.scores_csv is None:
        return build_judged_dataset(clips, seed=derive_seed(args.seed, 2),
                                    config=JudgeConfig(noise=cfg["eval"]["judge_noise"]), ref_ids=ids)
    if args.corpus is None:
        raise ConfigError("--scores-csv needs --corpus holding the scored WAVs")
    root = Path(args.corpus)
    out = []
    for r in read_csv_rows(args.scores_csv):
        missing = {"clip_id", "ref_id", "kind", "params_json", "score_2afc"} - set(r)
        if missing:
            raise ConfigError(f"scores CSV lacks column(s) {sorted(missing)}")
        spec = PerturbationSpec(r["kind"], json.loads(r["params_json"]))
        out.append(JudgedPair(r["ref_id"], r["clip_id"], spec, read_wav(root / f"{r['ref_id']}.wav"),
                              read_wav(root / f"{r['clip_id']}.wav"), int(r["score_2afc"])))
    if not out:
        raise ConfigError("scores CSV is empty")
    return out


# ------------------------------------------------------------- subcommands

def cmd_synth(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = synth_corpus(corpus_config(cfg), seed=args.seed)
    rows = []
    for i, (clip, label) in enumerate(data):
        cid = f"clip{i:04d}"
        write_wav(clip, out / f"{cid}.wav")
        rows.append([cid, label])
    write_csv(out / "labels.csv", ["clip_id", "label"], rows, cfg, args.seed)
    print(f"wrote {len(rows)} clips to {out}")


PARAM_FLAGS = {"eps_rel": "eps-rel", "eta_rel": "eta-rel", "band_index": "band", "scale": "scale",
               "semitones": "semitones", "factor": "factor", "threshold_dbfs": "threshold-dbfs", "ratio": "ratio"}


def cmd_perturb(args, cfg):
    clip = read_wav(args.input)
    kinds = cfg["perturb"]["kinds"]
    kind = parse_kind(args.kind) if args.kind else parse_kind(kinds[args.seed % len(kinds)])
    names = list(PARAM_RANGES[kind])
    given = {n: getattr(args, n) for n in names if getattr(args, n) is not None}
    stray = [PARAM_FLAGS[n] for n in PARAM_FLAGS if n not in names and getattr(args, n) is not None]
    if stray:
        raise ConfigError(f"--{stray[0]} does not apply to {kind.name}")
    if not given:
        spec = sample_spec(args.seed, kind)
    elif len(given) != len(names):
        raise ConfigError(f"{kind.name} needs all of {['--' + PARAM_FLAGS[n] for n in names]}")
    else:
        spec = PerturbationSpec(kind, given, args.seed)
    out = Path(args.output)
    write_wav(apply(spec, clip), out)
    sidecar = out.with_suffix(".json")
    sidecar.write_text(json.dumps({**spec.to_json(), "provenance": provenance(cfg, args.seed)}, indent=2))
    print(json.dumps(spec.to_json()))


def _wav_inputs(paths) -> list[Path]:
    files = []
    for p in map(Path, paths):
        files += sorted(p.glob("*.wav")) if p.is_dir() else [p]
    if not files:
        raise ConfigError("no input WAV files")
    return files


def cmd_embed(args, cfg):
    out = Path(args.embeddings_dir or args.out or "")
    if not str(out) or str(out) == ".":
        raise ConfigError("embed needs --embeddings-dir or --out")
    out.mkdir(parents=True, exist_ok=True)
    model = PCSCTModel.load(args.model) if args.model else None
    enc_seed = cfg["train"]["encoder_seed"]
    files = _wav_inputs(args.inputs)
    for f in files:
        clip = read_wav(f)
        seq = get_encoder(enc_seed, clip.sample_rate_hz)(clip)
        if model is not None:
            seq = embed_pamt(seq, model)
        write_embeddings(seq, out / f"{f.stem}.pemb")
    print(f"wrote {len(files)} embedding files to {out}")


def cmd_train(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ids, clips, _ = load_corpus(args, cfg)
    tc = TrainConfig(**cfg["train"], seed=args.seed)
    if args.scores_csv:
        val = judged_dataset(args, cfg, ids, clips)
        val_refs = {p.ref_id for p in val}
        train_idx = [i for i, cid in enumerate(ids) if cid not in val_refs]
    else:
        n_val = max(2, int(round(tc.val_frac * len(clips))))
        perm = np.random.Generator(np.random.Philox(key=derive_seed(args.seed, 5))).permutation(len(clips))
        val_idx, train_idx = sorted(perm[:n_val]), sorted(perm[n_val:])
        val = build_judged_dataset([clips[i] for i in val_idx], seed=derive_seed(args.seed, 2),
                                   config=JudgeConfig(noise=cfg["eval"]["judge_noise"]),
                                   ref_ids=[ids[i] for i in val_idx])
    if len(train_idx) < 2:
        raise ConfigError("need at least 2 training clips after the validation split")
    enc = encode_dataset(val, tc.encoder_seed)
    source = audio_pair_source([clips[i] for i in train_idx], seed=args.seed, encoder_seed=tc.encoder_seed,
                               kinds=cfg["perturb"]["kinds"])
    model, tlog = train(source, tc, val_metric=judge_val_metric(val, enc))
    model.save(out / "model.pckp")
    tlog.write_csv(out / "train_log.csv", provenance(cfg, args.seed))
    print(f"best epoch {tlog.best_epoch} val spearman {tlog.best_val:.4f}; wrote {out / 'model.pckp'}")


def cmd_eval_metrics(args, cfg):
    ids, clips, _ = load_corpus(args, cfg)
    model = load_model(args.model)
    dataset = judged_dataset(args, cfg, ids, clips)
    _, test = split_refs([p.ref_id for p in dataset], derive_seed(args.seed, 3), cfg["eval"]["test_frac"])
    emb = load_embeddings_dir(args.embeddings_dir) if args.embeddings_dir else None
    table = metric_table(dataset, model, test, cfg["train"]["encoder_seed"], emb)
    rows = [[name, _fmt(r.spearman), _fmt(r.f1)] for name, r in table.items()]
    out = Path(args.out)
    write_csv(out, ["metric_name", "spearman", "f1"], rows, cfg, args.seed)
    scores = [[p.clip_id, p.ref_id, p.spec.kind.name, json.dumps(p.spec.params), p.score_2afc, ""] for p in dataset]
    write_csv(out.with_name(out.stem + "_scores.csv"),
              ["clip_id", "ref_id", "kind", "params_json", "score_2afc", "score_mos"], scores, cfg, args.seed)
    for name, r in table.items():
        print(f"{name:20s} spearman {r.spearman:+.3f}  f1 {r.f1:5.1f}")


def _sample_set(path: str, enc_seed: int) -> np.ndarray:
    """Frame embeddings pooled over a .pemb file, a WAV, or a directory of either."""
    p = Path(path)
    files = sorted(p.glob("*.pemb")) or sorted(p.glob("*.wav")) if p.is_dir() else [p]
    if not files:
        raise ConfigError(f"no .pemb or .wav files under {p}")
    frames = []
    for f in files:
        if f.suffix == ".pemb":
            frames.append(read_embeddings(f).data)
        else:
            clip = read_wav(f)
            frames.append(get_encoder(enc_seed, clip.sample_rate_hz)(clip).data)
    if len({x.shape[1] for x in frames}) != 1:
        raise ConfigError("embedding dimensions differ within a set")
    return np.concatenate(frames).astype(np.float64)


def cmd_fad(args, cfg):
    a = _sample_set(args.set_a, cfg["train"]["encoder_seed"])
    b = _sample_set(args.set_b, cfg["train"]["encoder_seed"])
    if a.shape[1] != b.shape[1]:
        raise ConfigError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    print(repr(frechet_distance_samples(a, b)))


def _attack_setup(args, cfg):
    ids, clips, labels = load_corpus(args, cfg)
    if len(set(labels)) < 2:
        raise ConfigError("attack/defend need a labelled corpus with at least two classes")
    model = load_model(args.model)
    split = stratified_split(labels, cfg["attack"]["test_frac"], derive_seed(args.seed, 11))
    return ids, clips, np.asarray(labels), model, split


def _defense_config(cfg, seed, eps=0.0) -> DefenseConfig:
    a = cfg["attack"]
    return DefenseConfig(epochs=a["defense_epochs"], lr=a["defense_lr"], eps=eps,
                         attack_steps=a["defense_attack_steps"], seed=seed)


def cmd_attack(args, cfg):
    ids, clips, labels, model, split = _attack_setup(args, cfg)
    a = cfg["attack"]
    enc_seed = cfg["train"]["encoder_seed"]
    enc = get_encoder(enc_seed, clips[0].sample_rate_hz)
    train_clips = [clips[i] for i in split.train]
    z = pooled_pamt([enc(c).data for c in train_clips], model)
    clf, _ = adversarial_train(z, labels[split.train], _defense_config(cfg, args.seed),
                               n_classes=int(labels.max()) + 1)
    eps = a["eps"] or dpamt_budget(train_clips, model, seed=args.seed, quantile=a["eps_quantile"],
                                   encoder_seed=enc_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    test_clips = [clips[i] for i in split.test]
    for fam in a["families"]:
        acfg = AttackConfig(fam, eps=eps if fam == "pgd_dpamt" else 0.0, steps=a["steps"],
                            linf_rel=a["linf_rel"], bark_scale=a["bark_scale"])
        res = attack_batch(test_clips, labels[split.test], clf, model, acfg, enc_seed)
        pred = clf.predict(pooled_pamt([enc(r.clip).data for r in res], model))
        for i, r, p in zip(split.test, res, pred):
            write_wav(r.clip, out / f"{ids[i]}_{fam}.wav")
            rows.append([ids[i], fam, _fmt(r.budget), _fmt(r.achieved), int(r.satisfied), int(labels[i]), int(p)])
    write_csv(out / "constraint_report.csv",
              ["clip_id", "family", "budget", "achieved", "satisfied", "label", "prediction"], rows, cfg, args.seed)
    bad = sum(1 for r in rows if not r[4])
    print(f"{len(rows)} adversarial examples, {bad} constraint violations")
    if bad:
        raise RuntimeError(f"{bad} adversarial examples violate their budget")


def cmd_defend(args, cfg):
    _, clips, labels, model, split = _attack_setup(args, cfg)
    a = cfg["attack"]
    reports = robustness_table(clips, labels, model, split, a, _defense_config(cfg, args.seed),
                               seed=args.seed, encoder_seed=cfg["train"]["encoder_seed"])
    rows = [[m, _fmt(r.clean_acc)] + [_fmt(r.per_family[f]) for f in a["families"]] + [_fmt(r.union_acc)]
            for m, r in reports.items()]
    write_csv(Path(args.out), ["method", "clean_acc"] + list(a["families"]) + ["union_acc"], rows, cfg, args.seed)
    for m, r in reports.items():
        print(f"{m:12s} clean {r.clean_acc:.3f} union {r.union_acc:.3f}")


# ------------------------------------------------------------------ parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file")
    common.add_argument("--seed", type=int, default=0, help="master seed (unsigned 64-bit)")
    common.add_argument("--out", help="output path")
    common.add_argument("--embeddings-dir", help="directory of <clip_id>.pemb files")
    common.add_argument("--scores-csv", help="human scores replacing the synthetic judge")
    common.add_argument("--corpus", help="directory of WAVs with labels.csv (default: synthesize)")
    common.add_argument("--model", help="PCKP checkpoint of a trained PAMT model")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="pamt", description="Perceptually aligned music embeddings.")
    p.add_argument("--version", action="version", version=f"pamt {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="write a synthetic labelled corpus")
    sp = sub.add_parser("perturb", parents=[common], help="apply one perturbation to a WAV")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.add_argument("--kind", help=f"one of {sorted(KIND_ALIASES)} (default: drawn from --seed)")
    for name, flag in PARAM_FLAGS.items():
        sp.add_argument(f"--{flag}", dest=name, type=int if name == "band_index" else float)
    se = sub.add_parser("embed", parents=[common], help="encode WAVs to .pemb files")
    se.add_argument("inputs", nargs="+")
    sub.add_parser("train", parents=[common], help="train the PAMT model")
    sub.add_parser("eval-metrics", parents=[common], help="correlation table against judge scores")
    sf = sub.add_parser("fad", parents=[common], help="Frechet distance between two embedding sets")
    sf.add_argument("set_a")
    sf.add_argument("set_b")
    sub.add_parser("attack", parents=[common], help="write adversarial examples and a constraint report")
    sub.add_parser("defend", parents=[common], help="robustness table with and without PAMT-space AT")
    return p


COMMANDS = {"synth": cmd_synth, "perturb": cmd_perturb, "embed": cmd_embed, "train": cmd_train,
            "eval-metrics": cmd_eval_metrics, "fad": cmd_fad, "attack": cmd_attack, "defend": cmd_defend}
NEEDS_OUT = {"synth", "train", "eval-metrics", "attack", "defend"}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        threads = int(os.environ.get("PAMT_THREADS", "1"))
        if threads < 1:
            raise ValueError
    except ValueError:
        print("pamt: error: PAMT_THREADS must be a positive integer", file=sys.stderr)
        return 1
    torch.set_num_threads(threads)
    try:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        if args.command in NEEDS_OUT and not args.out:
            raise ConfigError(f"{args.command} needs --out")
        cfg = load_config(args.config)
        COMMANDS[args.command](args, cfg)
    except (ValueError, KeyError, TypeError) as exc:
        print(f"pamt: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures: I/O, numerics
        print(f"pamt: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
