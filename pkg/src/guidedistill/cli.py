"""Command-line pipeline: data generation, training, sampling, evaluation.

Commands read defaults from a plain key=value config file with [command]
sections; explicit flags override file values, and unknown keys are
rejected. Each run writes its artifacts plus a resolved-config snapshot
into a directory stamped by the hash of that resolved config, so identical
configs land in identical places with identical contents.

Exit codes: 0 ok, 2 usage, 3 io, 4 incompatible checkpoint, 5 numeric
failure.
"""

import argparse
import hashlib
import os
import sys

import numpy as np

from .adapter import GuidanceAdapter, StudentModel, plug_into
from .autodiff import NumericError
from .data import DatasetSpec, corrupted_fraction, make_dataset
from .distill import DistillConfig, train_adapter
from .fileio import (CheckpointError, load_adapter, load_dataset, load_teacher,
                     save_adapter, save_checkpoint, save_dataset, save_teacher,
                     write_csv, write_pgm)
from .metrics import (EvalReport, kd_consistency, msc_ablation,
                      negative_control_eval, sample_eval_pairs, sliced_wasserstein)
from .prompts import parse_prompt, prompt_to_text
from .sampling import bench, sample_set, sample_student, sample_teacher_cfg
from .schedule import CosineSchedule
from .training import TeacherConfig, finetune_teacher, train_teacher
from .unet import ArchitectureError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_CKPT = 4
EXIT_NUMERIC = 5


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config handling

def parse_config_file(path):
    """Line-oriented key=value file with [section] headers. Returns
    {section: {key: value}}; keys before any header land in ''."""
    sections = {"": {}}
    cur = ""
    try:
        lines = open(path, encoding="utf-8").read().splitlines()
    except OSError as e:
        raise FileNotFoundError(str(e))
    for ln, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            cur = line[1:-1].strip()
            sections.setdefault(cur, {})
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{ln}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        sections[cur][k.strip()] = v.strip()
    return sections


def resolve_config(args, command, known):
    """Merge file values and CLI flags; flags win. Returns {key: str}."""
    values = {}
    if getattr(args, "config", None):
        sections = parse_config_file(args.config)
        for scope in ("", command):
            for k, v in sections.get(scope, {}).items():
                if k not in known:
                    raise UsageError(f"unknown config key {k!r} for {command}")
                values[k] = v
    for k in known:
        attr = "lambda_" if k == "lambda" else k.replace("-", "_")
        flag = getattr(args, attr, None)
        if flag is not None:
            values[k] = str(flag)
    return values


def run_dir_for(out, command, resolved):
    blob = ";".join(f"{k}={resolved[k]}" for k in sorted(resolved))
    stamp = hashlib.sha256(blob.encode()).hexdigest()[:8]
    d = os.path.join(out, f"{command}-{stamp}")
    os.makedirs(d, exist_ok=True)
    return d


def write_snapshot(run_dir, command, resolved):
    path = os.path.join(run_dir, "config.resolved")
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"[{command}]\n")
        for k in sorted(resolved):
            f.write(f"{k}={resolved[k]}\n")
    return path


def _get(resolved, key, cast, default=None):
    if key not in resolved:
        if default is None:
            raise UsageError(f"missing required key {key!r}")
        return default
    try:
        if cast is bool:
            return resolved[key].lower() in ("1", "true", "yes", "on")
        return cast(resolved[key])
    except ValueError:
        raise UsageError(f"invalid value for {key!r}: {resolved[key]!r}")


def _load_student(teacher_path, adapter_path):
    teacher = load_teacher(teacher_path)
    teacher.set_trainable(False)
    adapter = load_adapter(adapter_path)
    return teacher, plug_into(adapter, teacher)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args):
    known = ["size", "style", "corruption-prob", "seed", "out", "threads"]
    r = resolve_config(args, "gen-data", known)
    size = _get(r, "size", int)
    style = _get(r, "style", str, "base")
    cprob = _get(r, "corruption-prob", float, 0.3)
    seed = _get(r, "seed", int, 0)
    out = _get(r, "out", str, "runs")
    rd = run_dir_for(out, "gen-data", r)
    write_snapshot(rd, "gen-data", r)
    spec = DatasetSpec(size=size, style=style, corruption_prob=cprob, seed=seed)
    ds = make_dataset(spec)
    path = os.path.join(rd, "dataset.bin")
    save_dataset(path, ds)
    with open(os.path.join(rd, "dataset.manifest"), "w", encoding="utf-8") as f:
        f.write(f"records={len(ds)}\nstyle={style}\nseed={seed}\n")
        f.write(f"corrupted_fraction={corrupted_fraction(ds)!r}\n")
        f.write(f"mean_pixel={float(ds.images.mean())!r}\n")
    print(rd)
    return EXIT_OK


def cmd_train_teacher(args):
    known = ["data", "steps", "batch", "lr", "wd", "dropout", "seed", "out", "threads"]
    r = resolve_config(args, "train-teacher", known)
    ds = load_dataset(_get(r, "data", str))
    cfg = TeacherConfig(steps=_get(r, "steps", int, 20000), batch=_get(r, "batch", int, 32),
                        lr=_get(r, "lr", float, 1e-4), weight_decay=_get(r, "wd", float, 0.01),
                        cond_dropout=_get(r, "dropout", float, 0.1), seed=_get(r, "seed", int, 0))
    out = _get(r, "out", str, "runs")
    rd = run_dir_for(out, "train-teacher", r)
    write_snapshot(rd, "train-teacher", r)
    model, history = train_teacher(ds, cfg, progress=_progress("train-teacher"))
    save_teacher(os.path.join(rd, "teacher.ckpt"), model)
    write_csv(os.path.join(rd, "losses.csv"), ["step", "loss", "n_uncond", "wall_ms"],
              [(h["step"], h["loss"], h["n_uncond"], h["wall_ms"]) for h in history])
    print(rd)
    return EXIT_OK


def cmd_finetune_teacher(args):
    known = ["teacher", "data", "steps", "batch", "lr", "wd", "dropout", "seed", "out", "threads"]
    r = resolve_config(args, "finetune-teacher", known)
    base = load_teacher(_get(r, "teacher", str))
    ds = load_dataset(_get(r, "data", str))
    cfg = TeacherConfig(steps=_get(r, "steps", int, 2000), batch=_get(r, "batch", int, 32),
                        lr=_get(r, "lr", float, 1e-4), weight_decay=_get(r, "wd", float, 0.01),
                        cond_dropout=_get(r, "dropout", float, 0.1), seed=_get(r, "seed", int, 0))
    out = _get(r, "out", str, "runs")
    rd = run_dir_for(out, "finetune-teacher", r)
    write_snapshot(rd, "finetune-teacher", r)
    model, history = finetune_teacher(base, ds, cfg, progress=_progress("finetune-teacher"))
    save_teacher(os.path.join(rd, "teacher-ft.ckpt"), model)
    write_csv(os.path.join(rd, "losses.csv"), ["step", "loss", "n_uncond", "wall_ms"],
              [(h["step"], h["loss"], h["n_uncond"], h["wall_ms"]) for h in history])
    print(rd)
    return EXIT_OK


def cmd_train_adapter(args):
    known = ["teacher", "data", "lambda", "delta", "w", "steps", "batch", "lr", "wd",
             "nmax", "ckpt-every", "attn-norm", "seed", "out", "threads"]
    r = resolve_config(args, "train-adapter", known)
    teacher = load_teacher(_get(r, "teacher", str))
    ds = load_dataset(_get(r, "data", str))
    cfg = DistillConfig(w=_get(r, "w", float, 8.0), lam=_get(r, "lambda", float, 0.1),
                        delta=_get(r, "delta", float, 0.25), n_max=_get(r, "nmax", int, 3),
                        batch=_get(r, "batch", int, 32), steps=_get(r, "steps", int, 5000),
                        lr=_get(r, "lr", float, 1e-4), weight_decay=_get(r, "wd", float, 0.01),
                        seed=_get(r, "seed", int, 0), ckpt_every=_get(r, "ckpt-every", int, 1000),
                        normalize=_get(r, "attn-norm", bool, True))
    out = _get(r, "out", str, "runs")
    rd = run_dir_for(out, "train-adapter", r)
    write_snapshot(rd, "train-adapter", r)
    adapter, _ = train_adapter(teacher, ds, cfg, csv_path=os.path.join(rd, "losses.csv"),
                               ckpt_dir=rd, progress=_progress("train-adapter"))
    save_adapter(os.path.join(rd, "adapter.ckpt"), adapter)
    print(rd)
    return EXIT_OK


def cmd_sample(args):
    known = ["teacher", "adapter", "prompt", "negative", "steps", "w", "count",
             "keep-latents", "seed", "out", "threads"]
    r = resolve_config(args, "sample", known)
    teacher = load_teacher(_get(r, "teacher", str))
    teacher.set_trainable(False)
    adapter_path = r.get("adapter")
    steps = _get(r, "steps", int, 4)
    w = _get(r, "w", float, 8.0)
    count = _get(r, "count", int, 1)
    seed = _get(r, "seed", int, 0)
    keep = _get(r, "keep-latents", bool, False)
    prompt = parse_prompt(r.get("prompt", ""))
    negative = parse_prompt(r.get("negative", ""))
    out = _get(r, "out", str, "runs")
    rd = run_dir_for(out, "sample", r)
    write_snapshot(rd, "sample", r)
    schedule = CosineSchedule()
    student = None
    if adapter_path:
        adapter = load_adapter(adapter_path)
        student = plug_into(adapter, teacher)
    rows = []
    for i in range(count):
        if student is not None:
            tr = sample_student(student, schedule, prompt, negative, steps, seed,
                                keep_latents=keep, index=i)
        else:
            tr = sample_teacher_cfg(teacher, schedule, prompt, negative, steps, w, seed,
                                    keep_latents=keep, index=i)
        write_pgm(os.path.join(rd, f"sample-{i:03d}.pgm"), tr.z0)
        blobs = [("z_init", tr.z_init), ("z0", tr.z0), ("times", tr.times)]
        if keep and tr.latents:
            blobs += [(f"latent.{k:04d}", lat) for k, lat in enumerate(tr.latents)]
        save_checkpoint(os.path.join(rd, f"sample-{i:03d}.trace"), blobs,
                        hashlib.sha256(b"latent-trace-v1").hexdigest())
        rows.append([i, seed, steps, tr.nfe, tr.wall_ms])
    write_csv(os.path.join(rd, "traces.csv"),
              ["index", "seed", "steps", "nfe", "wall_ms"], rows)
    print(rd)
    return EXIT_OK


def cmd_eval(args):
    known = ["mode", "teacher", "adapter", "adapter-b", "steps", "ref-steps",
             "steps-pair", "budget", "w", "seed", "out", "threads"]
    r = resolve_config(args, "eval", known)
    mode = _get(r, "mode", str)
    seed = _get(r, "seed", int, 0)
    budget = _get(r, "budget", int, 256)
    w = _get(r, "w", float, 8.0)
    threads = _get(r, "threads", int, 1)
    out = _get(r, "out", str, "runs")
    rd = run_dir_for(out, "eval", r)
    write_snapshot(rd, "eval", r)
    schedule = CosineSchedule()

    if mode == "kd":
        teacher, student = _load_student(_get(r, "teacher", str), _get(r, "adapter", str))
        steps = _get(r, "steps", int, 4)
        ref_steps = _get(r, "ref-steps", int, 25)
        pairs = sample_eval_pairs(seed, budget)
        ref = sample_set(teacher, schedule, pairs, ref_steps, seed, w=w,
                         model_id="teacher-ref", threads=threads)
        stu = sample_set(student, schedule, pairs, steps, seed,
                         model_id="student", threads=threads)
        base = sample_set(teacher, schedule, pairs, steps, seed, w=w,
                          model_id="teacher-fewstep", threads=threads)
        rows = []
        for s in (stu, base):
            res = kd_consistency(s, ref, seed=seed)
            rows.append(res["report"].row())
        write_csv(os.path.join(rd, "kd.csv"), EvalReport.HEADER, rows)
    elif mode == "negctrl":
        _, student = _load_student(_get(r, "teacher", str), _get(r, "adapter", str))
        steps = _get(r, "steps", int, 4)
        positives = [p for p, _ in sample_eval_pairs(seed, 16, with_negatives=False)]
        res = negative_control_eval(student, schedule, positives, steps=steps,
                                    samples_per_cell=budget, seed=seed, threads=threads)
        write_csv(os.path.join(rd, "negctrl.csv"),
                  ["cell", "phrase", "presence_rate"], res["table"])
    elif mode == "msc":
        teacher = load_teacher(_get(r, "teacher", str))
        teacher.set_trainable(False)
        students = {
            "adapter-a": plug_into(load_adapter(_get(r, "adapter", str)), teacher),
            "adapter-b": plug_into(load_adapter(_get(r, "adapter-b", str)), teacher),
        }
        lo, hi = (int(x) for x in _get(r, "steps-pair", str, "4,8").split(","))
        pairs = sample_eval_pairs(seed, budget)
        res = msc_ablation(students, schedule, pairs, steps_pair=(lo, hi),
                           seed=seed, threads=threads)
        rows = [[name, lo, hi, res[name]["cross_mse"]] for name in sorted(res)]
        write_csv(os.path.join(rd, "msc.csv"),
                  ["adapter", "steps_lo", "steps_hi", "cross_step_mse"], rows)
    else:
        raise UsageError(f"unknown eval mode {mode!r}")
    print(rd)
    return EXIT_OK


def cmd_bench(args):
    known = ["teacher", "adapter", "steps-grid", "budget", "w", "seed", "out", "threads"]
    r = resolve_config(args, "bench", known)
    teacher = load_teacher(_get(r, "teacher", str))
    teacher.set_trainable(False)
    seed = _get(r, "seed", int, 0)
    budget = _get(r, "budget", int, 8)
    w = _get(r, "w", float, 8.0)
    grid = [int(x) for x in _get(r, "steps-grid", str, "4,8,12").split(",")]
    models = [("teacher-cfg", teacher)]
    if r.get("adapter"):
        models.append(("student", plug_into(load_adapter(r["adapter"]), teacher)))
    out = _get(r, "out", str, "runs")
    rd = run_dir_for(out, "bench", r)
    write_snapshot(rd, "bench", r)
    pairs = sample_eval_pairs(seed, budget)
    rows = bench(models, pairs, grid, CosineSchedule(), seed, w=w,
                 threads=_get(r, "threads", int, 1))
    write_csv(os.path.join(rd, "bench.csv"),
              ["model", "steps", "nfe_per_sample", "wall_ms_mean", "distance"], rows)
    print(rd)
    return EXIT_OK


def cmd_ablate(args):
    known = ["teacher", "data", "what", "steps", "budget", "w", "seed", "out", "threads"]
    r = resolve_config(args, "ablate", known)
    teacher = load_teacher(_get(r, "teacher", str))
    ds = load_dataset(_get(r, "data", str))
    what = _get(r, "what", str, "msc")
    steps = _get(r, "steps", int, 1500)
    budget = _get(r, "budget", int, 128)
    w = _get(r, "w", float, 8.0)
    seed = _get(r, "seed", int, 0)
    out = _get(r, "out", str, "runs")
    rd = run_dir_for(out, "ablate", r)
    write_snapshot(rd, "ablate", r)
    schedule = CosineSchedule()
    if what == "msc":
        variants = {"with-msc": dict(lam=0.1), "no-msc": dict(lam=0.0)}
    elif what == "attn-norm":
        variants = {"with-norm": dict(normalize=True), "no-norm": dict(normalize=False)}
    else:
        raise UsageError(f"unknown ablation {what!r}")
    students = {}
    for name, override in variants.items():
        cfg = DistillConfig(steps=steps, seed=seed, w=w, **override)
        adapter, _ = train_adapter(teacher, ds, cfg,
                                   csv_path=os.path.join(rd, f"losses-{name}.csv"),
                                   ckpt_dir=None, progress=_progress(f"ablate:{name}"))
        save_adapter(os.path.join(rd, f"adapter-{name}.ckpt"), adapter)
        students[name] = StudentModel(teacher, adapter)
    pairs = sample_eval_pairs(seed, budget)
    res = msc_ablation(students, schedule, pairs, seed=seed)
    rows = [[name, res[name]["cross_mse"]] for name in sorted(res)]
    write_csv(os.path.join(rd, "ablate.csv"), ["variant", "cross_step_mse"], rows)
    print(rd)
    return EXIT_OK


def _progress(tag):
    def cb(step, info):
        if isinstance(info, dict):
            msg = " ".join(f"{k}={v:.4f}" for k, v in info.items() if k != "wall_ms")
        else:
            msg = f"loss={info:.4f}"
        print(f"[{tag}] step {step}: {msg}", file=sys.stderr)
    return cb


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="guidedistill",
                                description="One-pass guidance distillation pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, flags):
        sp = sub.add_parser(name)
        sp.set_defaults(fn=fn)
        sp.add_argument("--config")
        for flag, kw in flags:
            sp.add_argument(flag, **kw)
        return sp

    s = str
    add("gen-data", cmd_gen_data, [
        ("--size", dict(type=int)), ("--style", dict(type=s)),
        ("--corruption-prob", dict(type=float)), ("--seed", dict(type=int)),
        ("--out", dict(type=s)), ("--threads", dict(type=int))])
    common_train = [("--data", dict(type=s)), ("--steps", dict(type=int)),
                    ("--batch", dict(type=int)), ("--lr", dict(type=float)),
                    ("--wd", dict(type=float)), ("--dropout", dict(type=float)),
                    ("--seed", dict(type=int)), ("--out", dict(type=s)),
                    ("--threads", dict(type=int))]
    add("train-teacher", cmd_train_teacher, common_train)
    add("finetune-teacher", cmd_finetune_teacher,
        [("--teacher", dict(type=s))] + common_train)
    add("train-adapter", cmd_train_adapter, [
        ("--teacher", dict(type=s)), ("--data", dict(type=s)),
        ("--lambda", dict(type=float, dest="lambda_", metavar="LAMBDA")),
        ("--delta", dict(type=float)), ("--w", dict(type=float)),
        ("--steps", dict(type=int)), ("--batch", dict(type=int)),
        ("--lr", dict(type=float)), ("--wd", dict(type=float)),
        ("--nmax", dict(type=int)), ("--ckpt-every", dict(type=int)),
        ("--attn-norm", dict(type=s)), ("--seed", dict(type=int)),
        ("--out", dict(type=s)), ("--threads", dict(type=int))])
    add("sample", cmd_sample, [
        ("--teacher", dict(type=s)), ("--adapter", dict(type=s)),
        ("--prompt", dict(type=s)), ("--negative", dict(type=s)),
        ("--steps", dict(type=int)), ("--w", dict(type=float)),
        ("--count", dict(type=int)), ("--keep-latents", dict(type=s)),
        ("--seed", dict(type=int)), ("--out", dict(type=s)),
        ("--threads", dict(type=int))])
    add("eval", cmd_eval, [
        ("--mode", dict(type=s)), ("--teacher", dict(type=s)),
        ("--adapter", dict(type=s)), ("--adapter-b", dict(type=s)),
        ("--steps", dict(type=int)), ("--ref-steps", dict(type=int)),
        ("--steps-pair", dict(type=s)), ("--budget", dict(type=int)),
        ("--w", dict(type=float)), ("--seed", dict(type=int)),
        ("--out", dict(type=s)), ("--threads", dict(type=int))])
    add("bench", cmd_bench, [
        ("--teacher", dict(type=s)), ("--adapter", dict(type=s)),
        ("--steps-grid", dict(type=s)), ("--budget", dict(type=int)),
        ("--w", dict(type=float)), ("--seed", dict(type=int)),
        ("--out", dict(type=s)), ("--threads", dict(type=int))])
    add("ablate", cmd_ablate, [
        ("--teacher", dict(type=s)), ("--data", dict(type=s)),
        ("--what", dict(type=s)), ("--steps", dict(type=int)),
        ("--budget", dict(type=int)), ("--w", dict(type=float)),
        ("--seed", dict(type=int)), ("--out", dict(type=s)),
        ("--threads", dict(type=int))])
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"guidedistill: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"guidedistill: missing file: {e}", file=sys.stderr)
        return EXIT_IO
    except (CheckpointError, ArchitectureError) as e:
        print(f"guidedistill: incompatible checkpoint: {e}", file=sys.stderr)
        return EXIT_CKPT
    except (NumericError, FloatingPointError) as e:
        print(f"guidedistill: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
