"""Command-line entry point: ``agewarp <subcommand> ...``.

Every failure prints one line ``<category>: <message>`` to stderr and
exits with 2 (usage), 3 (input format) or 4 (numerical failure).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .grid import GeometryMismatch, GridGeometry, ScalarVolume, VectorField, warp
from .io import FormatError, read_volume, write_volume
from .lie import DEFAULT_EXP, ExpConfig, NonFiniteField, exp
from .metrics import metric_report
from .phantom import Marker, PhantomSpec, PhantomTemplates, individualize, make_template
from .register import RegistrationConfig, register
from .synthesis import CohortSchedule, DirectoryTemplates, synthesize, synthesize_no_pt
from .transport import conjugation_oracle, pole_ladder

EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERIC = 2, 3, 4


class CliError(Exception):
    def __init__(self, category: str, message: str, code: int):
        super().__init__(message)
        self.category = category
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # single-line usage errors
        raise CliError("usage", message, EXIT_USAGE)


def _ext(fmt: str) -> str:
    return ".nii" if fmt == "nifti" else ".raw"


def _read(path, want=None):
    obj = read_volume(path)
    if want is VectorField and not isinstance(obj, VectorField):
        raise CliError("format", f"{path} holds a scalar volume, expected a vector field", EXIT_FORMAT)
    if want is ScalarVolume and not isinstance(obj, ScalarVolume):
        raise CliError("format", f"{path} holds a vector field, expected a scalar volume", EXIT_FORMAT)
    return obj


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CliError("format", f"{path} is not valid JSON: {exc}", EXIT_FORMAT) from exc


# ---- subcommands -----------------------------------------------------------


def cmd_phantom(a) -> None:
    dims = tuple(a.dims)
    rates = {}
    if a.ventricle_rate is not None:
        rates["ventricle_rate"] = a.ventricle_rate
    if a.hippocampus_rate is not None:
        rates["hippocampus_rate"] = a.hippocampus_rate
    spec = PhantomSpec(
        GridGeometry(dims),
        a.age,
        a.cohort,
        seed=a.subject_seed if a.subject_seed is not None else 0,
        marker=Marker.parse(a.marker) if a.marker else None,
        **rates,
    )
    img, lab = make_template(spec)
    if a.subject_seed is not None or spec.marker is not None:
        img, lab = individualize(img, lab, spec)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    write_volume(img, out / f"image{_ext(a.format)}")
    write_volume(lab, out / f"labels{_ext(a.format)}")


def cmd_register(a) -> None:
    cfg = RegistrationConfig.from_dict(_load_json(a.config)) if a.config else RegistrationConfig()
    v = register(_read(a.moving, ScalarVolume), _read(a.fixed, ScalarVolume), cfg)
    write_volume(v, a.out_svf, kind="svf")


def cmd_exp(a) -> None:
    v = _read(a.svf, VectorField)
    write_volume(exp(-v if a.inverse else v), a.out, kind="displacement")


def cmd_transport(a) -> None:
    u, v = _read(a.u, VectorField), _read(a.v, VectorField)
    if a.oracle:
        write_volume(conjugation_oracle(u, v), a.out, kind="displacement")
    else:
        write_volume(pole_ladder(u, v), a.out, kind="svf")


def cmd_warp(a) -> None:
    img = _read(a.image, ScalarVolume)
    if a.labels and not img.is_labels:
        vals = img.values
        if not np.array_equal(vals, np.round(vals)):
            raise CliError("format", f"{a.image} has non-integer values, cannot warp as labels", EXIT_FORMAT)
        img = ScalarVolume(img.geometry, vals.astype(np.int32), is_labels=True)
    write_volume(warp(img, _read(a.disp, VectorField)), a.out)


def cmd_metrics(a) -> None:
    pred, truth = _read(a.pred, ScalarVolume), _read(a.truth, ScalarVolume)
    pl = _read(a.pred_labels, ScalarVolume) if a.pred_labels else None
    tl = _read(a.truth_labels, ScalarVolume) if a.truth_labels else None
    if (pl is None) != (tl is None):
        raise CliError("usage", "--pred-labels and --truth-labels go together", EXIT_USAGE)
    regions = _load_json(a.regions) if a.regions else None
    rep = metric_report(pred, truth, pl, tl, regions)
    Path(a.out).write_text(json.dumps(rep.to_flat(), indent=2, sort_keys=True) + "\n")


# ---- synthesize ------------------------------------------------------------


def _resolve_spec(a) -> dict:
    spec = _load_json(a.spec)
    base = Path(a.spec).resolve().parent
    spec.setdefault("registration", {})
    spec.setdefault("exp", {})
    spec.setdefault("output", {})
    if a.out:
        spec["output"]["dir"] = a.out
    if a.format:
        spec["output"]["format"] = a.format
    if a.iterations is not None:
        spec["registration"]["iterations_per_level"] = a.iterations
    if a.similarity:
        spec["registration"]["similarity"] = a.similarity
    if a.workers is not None:
        spec["workers"] = a.workers
    if a.no_pt:
        spec["method"] = "no_pt"
    spec.setdefault("method", "pole_ladder")
    spec["output"].setdefault("format", "native")
    if "dir" not in spec["output"]:
        raise CliError("usage", "runspec needs output.dir (or pass --out)", EXIT_USAGE)
    return spec, base


def _path(base: Path, p: str) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def _templates(spec: dict, base: Path):
    src = spec.get("templates")
    if not isinstance(src, dict) or len(src) != 1:
        raise CliError("usage", "runspec templates must hold exactly one of 'phantom' or 'directory'", EXIT_USAGE)
    if "directory" in src:
        return DirectoryTemplates(_path(base, src["directory"]))
    if "phantom" not in src:
        raise CliError("usage", f"unknown template source {next(iter(src))!r}", EXIT_USAGE)
    p = src["phantom"]
    geom = GridGeometry(tuple(p.get("dims", (64, 64, 64))), tuple(p.get("spacing", (1.0, 1.0, 1.0))))
    return PhantomTemplates(geom, {k.upper(): v for k, v in p.get("rates", {}).items()})


def _subject(spec: dict, base: Path, templates, schedule: CohortSchedule):
    sub = spec.get("subject")
    if not isinstance(sub, dict):
        raise CliError("usage", "runspec needs a subject object", EXIT_USAGE)
    if "phantom" in sub:
        if not isinstance(templates, PhantomTemplates):
            raise CliError("usage", "a phantom subject needs phantom templates", EXIT_USAGE)
        p = sub["phantom"]
        marker = Marker(tuple(p["marker"][:3]), p["marker"][3]) if p.get("marker") else None
        ps = PhantomSpec(
            templates.geometry,
            schedule.baseline_age,
            schedule.baseline_cohort,
            seed=int(p.get("seed", 0)),
            marker=marker,
            **templates.rates.get(schedule.baseline_cohort, {}),
        )
        return individualize(*templates.template(schedule.baseline_age, schedule.baseline_cohort), ps)
    img = _read(_path(base, sub["image"]), ScalarVolume)
    lab = _read(_path(base, sub["labels"]), ScalarVolume) if sub.get("labels") else None
    if lab is not None and not lab.is_labels:
        lab = ScalarVolume(lab.geometry, lab.values.astype(np.int32), is_labels=True)
    return img, lab


def _recorded(spec: dict) -> dict:
    """Spec as recorded in the manifest, minus settings that cannot change the outputs."""
    rec = json.loads(json.dumps(spec))
    rec["output"].pop("dir", None)
    rec.pop("workers", None)
    return rec


def config_hash(spec: dict) -> str:
    canon = json.dumps(spec, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def cmd_synthesize(a) -> None:
    spec, base = _resolve_spec(a)
    try:
        schedule = CohortSchedule.from_dict(spec["schedule"])
    except KeyError as exc:
        raise CliError("usage", f"runspec schedule is missing {exc}", EXIT_USAGE) from exc
    reg_cfg = RegistrationConfig.from_dict(spec["registration"])
    exp_cfg = ExpConfig(**spec["exp"]) if spec["exp"] else DEFAULT_EXP
    templates = _templates(spec, base)
    img, lab = _subject(spec, base, templates, schedule)
    workers = spec.get("workers")
    if spec["method"] == "no_pt":
        res = synthesize_no_pt(img, schedule, templates, reg_cfg, lab, exp_cfg, workers)
    elif spec["method"] == "pole_ladder":
        res = synthesize(img, lab, schedule, templates, reg_cfg, exp_cfg, workers)
    else:
        raise CliError("usage", f"unknown method {spec['method']!r}", EXIT_USAGE)

    fmt = spec["output"]["format"]
    out = _path(base, spec["output"]["dir"]) if not a.out else Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    ext = _ext(fmt)
    entries = []
    for i, t in enumerate(res.targets):
        stem = f"t{i:02d}_{t.cohort.lower()}_{t.age:g}"
        files = {"image": stem + ext, "svf": stem + "_svf" + ext, "displacement": stem + "_disp" + ext}
        write_volume(t.image, out / files["image"], fmt)
        write_volume(t.svf, out / files["svf"], fmt, kind="svf")
        write_volume(t.displacement, out / files["displacement"], fmt, kind="displacement")
        if t.labels is not None:
            files["labels"] = stem + "_labels" + ext
            write_volume(t.labels, out / files["labels"], fmt)
        entries.append({**t.diagnostics(), "files": files})
    write_volume(res.subject_svf, out / ("subject_svf" + ext), fmt, kind="svf")
    manifest = {
        "version": __version__,
        "method": res.method,
        "config_hash": config_hash(_recorded(spec)),
        "config": _recorded(spec),
        "subject_svf": "subject_svf" + ext,
        "subject_svf_max_norm": res.subject_svf.max_norm(),
        "targets": entries,
        "failed": res.failed,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if a.strict and res.failed:
        bad = [f"{t.age:g}/{t.cohort}" for t in res.targets if t.flagged]
        raise CliError("numerical", f"non-positive Jacobian at target(s) {', '.join(bad)}", EXIT_NUMERIC)


# ---- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="agewarp", allow_abbrev=False, description="SVF deformation algebra and individualized aging synthesis")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("phantom", help="write a phantom template or subject")
    s.add_argument("--age", type=float, required=True)
    s.add_argument("--cohort", type=str.upper, choices=["HC", "AD"], required=True)
    s.add_argument("--subject-seed", type=int)
    s.add_argument("--marker", help="x,y,z,r in voxels")
    s.add_argument("--dims", type=int, nargs=3, default=[64, 64, 64])
    s.add_argument("--ventricle-rate", type=float)
    s.add_argument("--hippocampus-rate", type=float)
    s.add_argument("--format", choices=["native", "nifti"], default="native")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("register", help="SVF v with warp(moving, exp(v)) ~ fixed")
    s.add_argument("--moving", required=True)
    s.add_argument("--fixed", required=True)
    s.add_argument("--config")
    s.add_argument("--out-svf", required=True)
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("exp", help="exponentiate an SVF into a displacement")
    s.add_argument("--svf", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--inverse", action="store_true", help="exponentiate -v instead")
    s.set_defaults(func=cmd_exp)

    s = sub.add_parser("transport", help="pole-ladder transport of u along v")
    s.add_argument("--u", required=True)
    s.add_argument("--v", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--oracle", action="store_true", help="write the conjugation displacement instead")
    s.set_defaults(func=cmd_transport)

    s = sub.add_parser("warp", help="pull an image back through a displacement")
    s.add_argument("--image", required=True)
    s.add_argument("--disp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--labels", action="store_true", help="nearest-neighbour label sampling")
    s.set_defaults(func=cmd_warp)

    s = sub.add_parser("synthesize", help="run the full pipeline from a runspec")
    s.add_argument("--spec", required=True)
    s.add_argument("--no-pt", action="store_true", help="ablation without transport")
    s.add_argument("--strict", action="store_true", help="exit 4 if any target folds")
    s.add_argument("--out", help="override output.dir")
    s.add_argument("--format", choices=["native", "nifti"])
    s.add_argument("--iterations", type=int, help="override registration.iterations_per_level")
    s.add_argument("--similarity", choices=["SSD", "LNCC"])
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("metrics", help="similarity and volume report")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--pred-labels")
    s.add_argument("--truth-labels")
    s.add_argument("--regions", help="JSON mapping region name to label ids")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_metrics)
    return p


def _fail(category: str, message, code: int) -> int:
    text = " ".join(str(message).split())
    print(f"{category}: {text}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        args.func(args)
    except CliError as exc:
        return _fail(exc.category, exc, exc.code)
    except (FormatError, GeometryMismatch) as exc:
        return _fail("format", exc, EXIT_FORMAT)
    except FileNotFoundError as exc:
        return _fail("format", f"file not found: {exc.filename or exc}", EXIT_FORMAT)
    except NonFiniteField as exc:
        return _fail("numerical", exc, EXIT_NUMERIC)
    except (ValueError, TypeError, KeyError) as exc:
        return _fail("usage", exc, EXIT_USAGE)
    return 0


if __name__ == "__main__":
    sys.exit(main())
