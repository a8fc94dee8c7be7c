"""Command-line workflow: data, teacher, pseudo-labels, students, evaluation.

Every stage writes into ``<runs-root>/<name>/<stage>/`` together with a
``manifest.json`` that records the full experiment config, its digest, the
seed, stage parameters, sha256 of every artifact and the manifest hashes of
the upstream stages. A stage directory is never written twice; rerun under
a new ``--name`` instead.

Exit codes: 0 success, 1 user error (bad flags, missing or conflicting
artifacts), 2 internal error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import shutil
import sys
import traceback
from pathlib import Path


from . import __version__, metrics, pipeline
from .detector import Checkpoint
from .geometry import Box
from .pipeline import ExperimentConfig, PseudoLabel, TrainPlan
from .synth_data import load_config, load_dataset, serialize_dataset

log = logging.getLogger("pointquery")

RUNS_ENV = "POINTQUERY_RUNS"
PSEUDO_FORMAT_VERSION = 1


class UserError(Exception):
    """Problem the user can fix; reported without a traceback, exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- hashing and manifests ---------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


class Run:
    """One named run directory."""

    def __init__(self, root: Path, name: str, strict: bool = False):
        self.dir = Path(root) / name
        self.name = name
        self.strict = strict

    def stage_dir(self, stage: str) -> Path:
        return self.dir / stage

    def manifest(self, stage: str) -> dict:
        path = self.stage_dir(stage) / "manifest.json"
        if not path.exists():
            raise UserError(f"missing stage '{stage}': {path} not found")
        return json.loads(path.read_text())

    def begin(self, stage: str) -> Path:
        d = self.stage_dir(stage)
        if d.exists():
            raise UserError(f"{d} already exists; runs are never overwritten, pick a new --name")
        tmp = d.with_name(d.name + ".partial")
        if tmp.exists():
            # leftovers of an interrupted attempt at this same stage
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        return tmp

    def commit(self, stage: str, tmp: Path, cfg: ExperimentConfig, params: dict, upstream: list[str]) -> dict:
        artifacts = {
            str(p.relative_to(tmp)): _sha256(p) for p in sorted(tmp.rglob("*")) if p.is_file()
        }
        man = {
            "stage": stage,
            "version": __version__,
            "config": cfg.to_dict(),
            "config_digest": cfg.digest(),
            "seed": cfg.seed,
            "params": params,
            "upstream": {u: self.manifest(u)["manifest_hash"] for u in upstream},
            "artifacts": artifacts,
        }
        man["manifest_hash"] = hashlib.sha256(_canonical(man)).hexdigest()
        (tmp / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
        os.replace(tmp, self.stage_dir(stage))
        return man

    def checkpoint(self, stage: str) -> Checkpoint:
        path = self.stage_dir(stage) / "checkpoint.pt"
        if not path.exists():
            cmd = {"teacher": "train-teacher", "supervised": "train-student --supervised-only"}.get(stage, "train-student")
            raise UserError(f"missing checkpoint: {path} (run `pointquery {cmd}` first)")
        self.verify(stage)
        return Checkpoint.load(path)

    def verify(self, stage: str) -> None:
        """Check recorded artifact hashes; mismatch is a warning, or an error when strict."""
        man = self.manifest(stage)
        for rel, digest in man["artifacts"].items():
            if _sha256(self.stage_dir(stage) / rel) != digest:
                self._conflict(f"artifact {stage}/{rel} does not match its manifest hash")

    def check_config(self, cfg: ExperimentConfig, stage: str) -> None:
        recorded = self.manifest(stage)["config_digest"]
        if recorded != cfg.digest():
            self._conflict(f"config digest {cfg.digest()[:12]} differs from stage '{stage}' ({recorded[:12]})")

    def _conflict(self, msg: str) -> None:
        if self.strict:
            raise UserError(msg)
        log.warning("%s", msg)


# -- config ------------------------------------------------------------------


def _config_from_args(args, run: Run | None = None) -> ExperimentConfig:
    """Config from --config, then the run's data manifest, then flag overrides."""
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UserError(f"config file not found: {path}")
        try:
            cfg = ExperimentConfig.from_dict(json.loads(path.read_text()))
        except (ValueError, TypeError, json.JSONDecodeError) as exc:
            raise UserError(f"invalid config {path}: {exc}") from exc
    elif run is not None and (run.stage_dir("data") / "manifest.json").exists():
        cfg = ExperimentConfig.from_dict(run.manifest("data")["config"])
    else:
        cfg = ExperimentConfig()
    kw = {}
    if getattr(args, "data_config", None):
        try:
            kw["data"] = load_config(args.data_config)
        except FileNotFoundError as exc:
            raise UserError(f"data config not found: {args.data_config}") from exc
    for flag, key in (("seed", "seed"), ("fraction", "fraction"), ("point_mode", "point_mode"),
                      ("num_train", "num_train"), ("num_val", "num_val"), ("tau", "tau")):
        v = getattr(args, flag, None)
        if v is not None:
            kw[key] = v
    if getattr(args, "teacher_epochs", None):
        kw["teacher_plan"] = _rescale(cfg.teacher_plan, args.teacher_epochs)
    if getattr(args, "student_epochs", None):
        kw["student_plan"] = _rescale(cfg.student_plan, args.student_epochs)
    if getattr(args, "ablations", None) is not None:
        kw["ablations"] = tuple(args.ablations)
    try:
        return cfg.replace(**kw) if kw else cfg
    except ValueError as exc:
        raise UserError(str(exc)) from exc


def _rescale(plan: TrainPlan, epochs: int) -> TrainPlan:
    base = {k: v for k, v in plan.to_dict().items() if k not in ("epochs", "milestones")}
    return TrainPlan.for_epochs(epochs, **base)


# -- pseudo-label files ------------------------------------------------------


def write_pseudo_labels(labels, path: Path, canvas: int) -> None:
    """COCO-like JSON; boxes in pixel xywh, plus ``score`` and ``point_index``."""
    anns = []
    for i, pl in enumerate(labels):
        x1, y1, x2, y2 = pl.box
        anns.append({
            "id": i,
            "image_id": int(pl.scene_id),
            "category_id": int(pl.category),
            "bbox": [x1 * canvas, y1 * canvas, (x2 - x1) * canvas, (y2 - y1) * canvas],
            "score": float(pl.score),
            "point_index": pl.instance_index,
        })
    doc = {
        "info": {"format_version": PSEUDO_FORMAT_VERSION, "kind": "pseudo-labels", "canvas_size": canvas},
        "images": sorted({a["image_id"] for a in anns}),
        "annotations": anns,
    }
    path.write_text(json.dumps(doc))


def read_pseudo_labels(path: Path) -> list[PseudoLabel]:
    doc = json.loads(Path(path).read_text())
    s = doc["info"]["canvas_size"]
    out = []
    for a in doc["annotations"]:
        x, y, w, h = a["bbox"]
        out.append(PseudoLabel(a["image_id"], Box(x / s, y / s, (x + w) / s, (y + h) / s), a["category_id"],
                               a["score"], a.get("point_index")))
    return out


# -- data loading ------------------------------------------------------------


def _load_data(run: Run):
    run.verify("data")
    d = run.stage_dir("data")
    train, split = load_dataset(d / "train")
    val, _ = load_dataset(d / "val")
    by_id = {s.scene_id: s for s in train}
    full = [by_id[i] for i in split.full_set]
    weak_scenes = [by_id[i] for i in split.weak_set]
    return full, weak_scenes, val


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_curve(path: Path, history) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss"])
    for e, v in enumerate(history):
        w.writerow([e + 1, f"{v:.6f}"])
    path.write_text(buf.getvalue())


# -- commands ----------------------------------------------------------------


def cmd_gen_data(args, run: Run) -> int:
    cfg = _config_from_args(args)
    train, val, split, _, _ = pipeline.prepare_data(cfg)
    tmp = run.begin("data")
    serialize_dataset(train, split, tmp / "train", cfg.data)
    serialize_dataset(val, None, tmp / "val", cfg.data)
    man = run.commit("data", tmp, cfg, {}, [])
    print(f"data: {len(train)} train ({len(split.full_set)} full), {len(val)} val -> {run.stage_dir('data')}")
    return _done(man)


def cmd_train_teacher(args, run: Run) -> int:
    cfg = _config_from_args(args, run)
    run.check_config(cfg, "data")
    full, _, _ = _load_data(run)
    ck = pipeline.train_teacher(cfg.teacher, dataclasses.replace(cfg.teacher_plan, seed=cfg.seed * 100 + 1),
                                full, cfg.point_mode, progress=_progress(args))
    tmp = run.begin("teacher")
    ck.save(tmp / "checkpoint.pt")
    _write_curve(tmp / "loss_curve.csv", ck.meta["loss_log"])
    return _done(run.commit("teacher", tmp, cfg, {}, ["data"]))


def cmd_pseudo_label(args, run: Run) -> int:
    cfg = _config_from_args(args, run)
    _, weak_scenes, _ = _load_data(run)
    weak = pipeline.weak_images(weak_scenes)
    if args.baseline:
        if not 0 <= cfg.tau <= 1:
            raise UserError(f"--tau must lie in [0, 1], got {cfg.tau}")
        source = "supervised"
        run.check_config(cfg, source)
        labels = pipeline.generate_pseudo_labels_baseline(run.checkpoint(source), weak, cfg.tau, args.constant_score)
        stage = "pseudo_baseline"
        params = {"tau": cfg.tau, "constant_score": args.constant_score}
    else:
        source = "teacher"
        run.check_config(cfg, source)
        labels = pipeline.generate_pseudo_labels(run.checkpoint(source), weak)
        stage = "pseudo"
        params = {}
    tmp = run.begin(stage)
    write_pseudo_labels(labels, tmp / "pseudo_labels.json", cfg.data.canvas_size)
    print(f"{stage}: {len(labels)} pseudo-labels for {len(weak)} weak images")
    return _done(run.commit(stage, tmp, cfg, params, ["data", source]))


def cmd_train_student(args, run: Run) -> int:
    cfg = _config_from_args(args, run)
    run.check_config(cfg, "data")
    full, weak_scenes, _ = _load_data(run)
    if args.supervised_only:
        stage, upstream, k = "supervised", ["data"], 2
        labels, weak = [], []
    else:
        src = "pseudo_baseline" if args.pseudo == "baseline" else "pseudo"
        path = run.stage_dir(src) / "pseudo_labels.json"
        if not path.exists():
            raise UserError(f"missing pseudo-labels: {path} (run `pointquery pseudo-label` first)")
        run.verify(src)
        labels, weak = read_pseudo_labels(path), pipeline.weak_images(weak_scenes)
        stage = "student_baseline" if args.pseudo == "baseline" else "student"
        upstream, k = ["data", src], (4 if args.pseudo == "baseline" else 3)
    plan = dataclasses.replace(cfg.student_plan, seed=cfg.seed * 100 + k)
    ck = pipeline.train_student(cfg.student, plan, full, labels, weak, progress=_progress(args))
    tmp = run.begin(stage)
    ck.save(tmp / "checkpoint.pt")
    _write_curve(tmp / "loss_curve.csv", ck.meta["loss_log"])
    return _done(run.commit(stage, tmp, cfg, {}, upstream))


def _eval_inputs(args, run: Run, cfg: ExperimentConfig):
    """Detections and ground truth for the evaluated target, plus upstream stages."""
    if args.target in ("pseudo", "pseudo_baseline"):
        path = run.stage_dir(args.target) / "pseudo_labels.json"
        if not path.exists():
            raise UserError(f"missing pseudo-labels: {path} (run `pointquery pseudo-label` first)")
        _, weak_scenes, _ = _load_data(run)
        labels = read_pseudo_labels(path)
        return labels, pipeline.pseudo_as_detections(labels), pipeline.ground_truth_of(weak_scenes), weak_scenes
    ck = run.checkpoint(args.target)
    _, _, val = _load_data(run)
    dets = pipeline.detect(ck, [(s.scene_id, s.image) for s in val])
    return None, dets, pipeline.ground_truth_of(val), val


def cmd_evaluate(args, run: Run) -> int:
    cfg = _config_from_args(args, run)
    labels, dets, gt, scenes = _eval_inputs(args, run, cfg)
    params = metrics.EvalParams(areas=metrics.area_ranges(cfg.area_reference))
    result = {"target": args.target, "coco": metrics.coco_eval(dets, gt, params).to_dict()}
    if labels is not None:
        result["recall50"] = metrics.instance_recall(pipeline.pseudo_as_boxes(labels), gt)
        if args.target == "pseudo":
            gt_inst = {(s.scene_id, i): inst.box for s in scenes for i, inst in enumerate(s.instances)}
            result["miou"] = metrics.pseudo_miou({(p.scene_id, p.instance_index): p.box for p in labels}, gt_inst)
    stage = f"evaluate_{args.target}"
    tmp = run.begin(stage)
    _write_json(tmp / "metrics.json", result)
    print(json.dumps(result["coco"], sort_keys=True))
    return _done(run.commit(stage, tmp, cfg, {"target": args.target}, ["data", args.target]))


def cmd_diagnose(args, run: Run) -> int:
    cfg = _config_from_args(args, run)
    _, dets, gt, _ = _eval_inputs(args, run, cfg)
    prof = metrics.tide_diagnose(dets, gt, args.t_fg, args.t_bg).to_dict()
    stage = f"diagnose_{args.target}"
    tmp = run.begin(stage)
    _write_json(tmp / "errors.json", prof)
    print(json.dumps(prof["counts"], sort_keys=True))
    params = {"target": args.target, "t_fg": args.t_fg, "t_bg": args.t_bg}
    return _done(run.commit(stage, tmp, cfg, params, ["data", args.target]))


SWEEP_MODELS = (("point", "point-teacher"), ("baseline", "baseline-teacher"), ("supervised", "supervised-only"))


def cmd_sweep(args, run: Run) -> int:
    cfg = _config_from_args(args, run).replace(ablations=(), baseline_student=True)
    fractions = sorted(set(args.fractions))
    for f in fractions:
        if not 0 < f < 1:
            raise UserError(f"fractions must lie in (0, 1), got {f}")
    tmp = run.begin("sweep")
    rows, reports = [], {}
    for f in fractions:
        rep = pipeline.run_experiment(cfg.replace(fraction=f), progress=_stage_progress(args, f"fraction {f}"))
        rep.pop("_curves")
        reports[str(f)] = rep
        for key, label in SWEEP_MODELS:
            rows.append({"fraction": f, "model": label, "seed": cfg.seed, **rep["students"][key]})
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    (tmp / "sweep.csv").write_text(buf.getvalue())
    (tmp / "sweep.json").write_text(pipeline.report_json({"rows": rows, "reports": reports}))
    print(buf.getvalue(), end="")
    return _done(run.commit("sweep", tmp, cfg, {"fractions": fractions}, []))


def cmd_run_experiment(args, run: Run) -> int:
    cfg = _config_from_args(args, run)
    tmp = run.begin("experiment")
    rep = pipeline.run_experiment(cfg, tmp, progress=_stage_progress(args, cfg.name))
    print(json.dumps(rep["students"], sort_keys=True))
    return _done(run.commit("experiment", tmp, cfg, {}, []))


def _done(man: dict) -> int:
    print(f"manifest {man['manifest_hash']}")
    return 0


def _progress(args):
    if args.quiet:
        return None
    return lambda epoch, loss: print(f"  epoch {epoch + 1}: loss {loss:.4f}", file=sys.stderr, flush=True)


def _stage_progress(args, prefix):
    if args.quiet:
        return None
    return lambda stage: print(f"[{prefix}] {stage}", file=sys.stderr, flush=True)


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pointquery", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--runs-root", default=None, help=f"run root (default ${RUNS_ENV} or ./runs)")
    common.add_argument("--name", default="default", help="run name, i.e. the directory under the run root")
    common.add_argument("--config", help="ExperimentConfig JSON file")
    common.add_argument("--seed", type=int)
    common.add_argument("--strict", action="store_true", help="treat config or artifact hash mismatches as errors")
    common.add_argument("-q", "--quiet", action="store_true")
    common.add_argument("-v", "--verbose", action="store_true")

    exp = argparse.ArgumentParser(add_help=False)
    exp.add_argument("--data-config", help="DataConfig JSON file")
    exp.add_argument("--fraction", type=float, help="share of fully labeled scenes")
    exp.add_argument("--point-mode", choices=("mask", "bbox", "center"))
    exp.add_argument("--num-train", type=int)
    exp.add_argument("--num-val", type=int)
    exp.add_argument("--teacher-epochs", type=int)
    exp.add_argument("--student-epochs", type=int)

    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common, exp], help="generate and store the dataset").set_defaults(fn=cmd_gen_data)
    sub.add_parser("train-teacher", parents=[common, exp], help="train the point-conditioned teacher").set_defaults(
        fn=cmd_train_teacher
    )

    s = sub.add_parser("pseudo-label", parents=[common, exp], help="pseudo-label the weak set")
    s.add_argument("--baseline", action="store_true", help="threshold the supervised detector instead of using points")
    s.add_argument("--tau", type=float, help="baseline probability threshold")
    s.add_argument("--constant-score", action="store_true", help="baseline: store score 0.5 instead of the probability")
    s.set_defaults(fn=cmd_pseudo_label)

    s = sub.add_parser("train-student", parents=[common, exp], help="train a set-prediction detector")
    s.add_argument("--supervised-only", action="store_true", help="use only the fully labeled scenes")
    s.add_argument("--pseudo", choices=("point", "baseline"), default="point", help="which pseudo-labels to add")
    s.set_defaults(fn=cmd_train_student)

    targets = ("student", "student_baseline", "supervised", "pseudo", "pseudo_baseline")
    for name, fn, helptext in (("evaluate", cmd_evaluate, "COCO metrics"), ("diagnose", cmd_diagnose, "error breakdown")):
        s = sub.add_parser(name, parents=[common, exp], help=helptext)
        s.add_argument("--target", choices=targets, default="student")
        if name == "diagnose":
            s.add_argument("--t-fg", type=float, default=0.5)
            s.add_argument("--t-bg", type=float, default=0.1)
        s.set_defaults(fn=fn)

    s = sub.add_parser("sweep", parents=[common, exp], help="AP vs data fraction for all three training schemes")
    s.add_argument("--fractions", type=float, nargs="+", required=True)
    s.set_defaults(fn=cmd_sweep)

    s = sub.add_parser("run-experiment", parents=[common, exp], help="full pipeline with report")
    s.add_argument("--ablations", nargs="*", choices=pipeline.ABLATIONS)
    s.set_defaults(fn=cmd_run_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    root = Path(args.runs_root or os.environ.get(RUNS_ENV) or "runs")
    run = Run(root, args.name, args.strict)
    try:
        return args.fn(args, run)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:  # noqa: BLE001
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
