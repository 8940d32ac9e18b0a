"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 input or parse error, 3 contract
violation (for example a patch segmenter breaking its protocol).

Every subcommand accepts ``--config FILE``: a flat ``key = value`` file whose
keys are the long flag names without leading dashes. Flags given on the
command line win over the file, the file wins over built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .errors import CascadeError, ContractViolation, InputError
from .phantom import DEFAULT_DIMS, DEFAULT_SPACING

log = logging.getLogger("livercascade")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_CONTRACT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _csv_ints(n: int | None = None):
    def conv(text: str) -> tuple[int, ...]:
        try:
            vals = tuple(int(v) for v in str(text).split(","))
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
        if n is not None and len(vals) != n:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated integers, got {text!r}")
        return vals

    return conv


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _jobs_default() -> int:
    return os.cpu_count() or 1


# ---------------------------------------------------------------- commands


def cmd_phantom(args) -> int:
    from .phantom import generate_case, random_spec, write_case

    out = Path(args.out)
    paths = []
    for i in range(args.cases):
        seed = args.seed + i
        spec = random_spec(
            seed,
            dims=args.dims,
            spacing=tuple(args.spacing),
            n_lesions=args.lesions,
            n_spurious=args.spurious,
            lesion_z_band=tuple(args.lesion_z_band) if args.lesion_z_band else None,
        )
        paths.append(str(write_case(generate_case(spec), out)))
        log.info("wrote case %s", spec.case_id)
    print(json.dumps({"manifests": paths}, indent=1))
    return EXIT_OK


def _emit(text: str, out: str | None) -> None:
    if out and out != "-":
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text if text.endswith("\n") else text + "\n")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _case_id_from(path: str) -> str:
    name = Path(path).name
    for suffix in (".nii.gz", ".nii", ".json"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return name


def cmd_detect(args) -> int:
    from .seg2det import extract_lesions
    from .sensitivity import sensitivity_mask
    from .volio.detjson import write_detections
    from .volio.nifti import read_probmaps

    prob = read_probmaps(args.prob)
    mask = sensitivity_mask(prob, args.factor)
    dets = extract_lesions(mask, min_volume_cm3=args.min_volume, case_id=args.case_id or _case_id_from(args.prob))
    _emit(write_detections(dets), args.out)
    log.info("%d detections at factor %g", len(dets), args.factor)
    return EXIT_OK


def _load_dets(path: str, min_volume: float):
    """Detection JSON, or a NIfTI label mask converted on the fly."""
    from .seg2det import extract_lesions
    from .volio.detjson import read_detections
    from .volio.nifti import read_volume

    if path.endswith((".nii", ".nii.gz")):
        return extract_lesions(read_volume(path), min_volume_cm3=min_volume, case_id=_case_id_from(path))
    return read_detections(Path(path))


def cmd_match(args) -> int:
    from .matcher import match_sets

    gt = _load_dets(args.gt, args.min_volume)
    pred = _load_dets(args.pred, args.min_volume)
    report = match_sets(gt, pred, args.min_overlap)
    _emit(json.dumps(report.to_dict(), indent=1), args.out)
    return EXIT_OK


def _shuffle_case(manifest_path: str, mask_path: str | None, dets=None):
    from .core import VoxelGrid, lesion_voxels
    from .pipeline import load_case
    from .shuffle import ShuffleCase

    case = load_case(manifest_path)
    if mask_path:
        from .volio.nifti import read_volume

        ref = read_volume(mask_path)
    elif case.gt is not None:
        ref = case.gt
    elif case.prob is not None:
        from .sensitivity import argmax_mask

        ref = argmax_mask(case.prob)
    else:
        raise InputError("no reference mask: give --mask or a manifest with gt_mask or prob")
    if dets is not None:
        # detections define the lesions; everything else keeps the reference labels
        data = ref.data.copy()
        data[lesion_voxels(data)] = 7
        grid = dets.label_grid()
        data[grid > 0] = grid[grid > 0]
        ref = VoxelGrid(data, ref.spacing)
    return case, ShuffleCase(case.case_id, case.images, ref)


def cmd_shuffle(args) -> int:
    from .seg2det import extract_lesions
    from .shuffle import ShuffleConfig, make_inference_patches, make_training_patches, write_patch_bundle
    from .volio.detjson import read_detections

    dets = read_detections(Path(args.det)) if args.det else None
    case, sc = _shuffle_case(args.manifest, args.mask, dets)
    if dets is None:
        dets = extract_lesions(sc.labels, sc.spacing, case_id=case.case_id)
    cfg = ShuffleConfig()
    if args.mode == "train":
        patches, failures = make_training_patches(sc, args.per_lesion, args.seed, list(dets), cfg)
        for f in failures:
            log.warning("patch failed: lesion %s scheme %s #%d: %s", f.lesion_id, f.scheme, f.index, f.error)
    else:
        patches, failures = [], []
        for d in dets:
            try:
                patches += make_inference_patches(d, sc, args.n, args.seed, not args.no_shuffle, cfg)
            except CascadeError as exc:
                log.warning("lesion %d skipped: %s", d.id, exc)
                failures.append(d.id)
    index = write_patch_bundle(patches, args.out)
    print(json.dumps({"index": str(index), "patches": len(patches), "failures": len(failures)}))
    return EXIT_OK


def cmd_reclassify(args) -> int:
    from .reclassify import ReclassifyConfig, make_segmenter, reclassify_set
    from .volio.detjson import read_detections, write_detections

    dets = read_detections(Path(args.det))
    case, sc = _shuffle_case(args.manifest, args.mask, dets)
    cfg = ReclassifyConfig(
        n_patches=args.n,
        discard_threshold_cm3=args.threshold,
        skip_volume_cm3=args.skip_volume,
        relabel_voting=not args.no_relabel,
        shuffle=not args.no_shuffle,
    )
    seg = make_segmenter(args.segmenter, case.gt, args.seed)
    out = reclassify_set(dets, sc, seg, cfg, args.seed, args.jobs)
    log.info("kept %d of %d detections", len(out), len(dets))
    _emit(write_detections(out), args.out)
    return EXIT_OK


def cmd_classify_patient(args) -> int:
    from .metrics import classify_patient, joint_classify
    from .volio.detjson import read_detections

    sets = [read_detections(Path(p)) for p in args.det]
    classes = [classify_patient(s) for s in sets]
    out = {"cases": [{"case_id": s.case_id, "file": p, "class": c.value} for s, p, c in zip(sets, args.det, classes)]}
    if args.joint:
        if len(classes) != 2:
            raise UsageError("--joint needs exactly two --det files")
        out["joint"] = joint_classify(classes[0], classes[1]).value
    _emit(json.dumps(out, indent=1), args.out)
    return EXIT_OK


def _collect_sets(paths: Sequence[str], min_volume: float) -> dict[str, object]:
    found = {}
    for p in paths:
        path = Path(p)
        files = sorted(path.glob("*.json")) if path.is_dir() else [path]
        for f in files:
            s = _load_dets(str(f), min_volume)
            if s.case_id in found:
                raise InputError(f"case {s.case_id!r} appears twice ({f})")
            found[s.case_id] = s
    return found


def cmd_evaluate(args) -> int:
    from .metrics import MODES, evaluate_sets

    gts = _collect_sets(args.gt, args.min_volume)
    preds = _collect_sets(args.pred, args.min_volume)
    missing = sorted(set(gts) ^ set(preds))
    if missing:
        raise InputError(f"cases without a partner on the other side: {missing}")
    ids = sorted(gts)
    rep = evaluate_sets([gts[i] for i in ids], [preds[i] for i in ids], variant="pred", min_overlap_voxels=args.min_overlap)
    if args.mode != "both":
        for modes in rep.lesion.values():
            for m in MODES:
                if m != args.mode:
                    modes.pop(m)
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(json.dumps(rep.to_dict(), indent=1) + "\n")
    sys.stdout.write(rep.to_text())
    return EXIT_OK


def cmd_pipeline(args) -> int:
    from .pipeline import PipelineConfig, run_cohort, write_cohort_outputs
    from .reclassify import ReclassifyConfig

    root = Path(args.manifest_dir)
    if not root.is_dir():
        raise InputError(f"manifest directory {root} does not exist")
    manifests = sorted(root.rglob("*.manifest.json"))
    if not manifests:
        raise InputError(f"no *.manifest.json files under {root}")
    config = PipelineConfig(
        factors=tuple(args.factors),
        min_volume_cm3=args.min_volume,
        reclassify=ReclassifyConfig(
            n_patches=args.n,
            discard_threshold_cm3=args.threshold,
            skip_volume_cm3=args.skip_volume,
            relabel_voting=not args.no_relabel,
        ),
        enable_reclassify=not args.no_reclassify,
        enable_shuffle_in_reclassify=not args.no_shuffle,
        segmenter=args.segmenter,
        seed=args.seed,
    )
    cohort = run_cohort(manifests, config, args.jobs)
    for f in cohort.failures:
        cause = f.cause
        if isinstance(cause, ContractViolation):
            raise cause
    paths = write_cohort_outputs(cohort, args.out)
    summary = {
        "cases": len(manifests),
        "succeeded": len(cohort.results),
        "failed": [f.to_dict() for f in cohort.failures],
        **{k: str(v) for k, v in paths.items()},
    }
    print(json.dumps(summary, indent=1))
    if not cohort.results:
        return EXIT_INPUT
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="key=value file supplying defaults for any flag")
    common.add_argument("--debug", action="store_true", help="show tracebacks and debug logging")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = _Parser(prog="livercascade", description="Cascaded liver-lesion detection post-processing.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("phantom", parents=[common], help="synthetic cases with known ground truth")
    psub = p.add_subparsers(dest="action", metavar="ACTION", parser_class=_Parser)
    psub.required = True
    g = psub.add_parser("gen", parents=[common], help="generate phantom cases")
    g.add_argument("--seed", type=int, default=0, help="seed of the first case; case i uses seed+i")
    g.add_argument("--cases", type=int, default=1, help="number of cases")
    g.add_argument("--dims", type=_csv_ints(3), default=DEFAULT_DIMS, help="Z,Y,X voxels")
    g.add_argument("--spacing", type=_csv_floats, default=list(DEFAULT_SPACING), help="sz,sy,sx in mm")
    g.add_argument("--lesions", type=_csv_ints(2), default=(1, 5), help="MIN,MAX lesions per case")
    g.add_argument("--spurious", type=_csv_ints(2), default=(0, 2), help="MIN,MAX spurious blobs per case")
    g.add_argument("--lesion-z-band", type=_csv_floats, default=None, help="LO,HI fractions of Z for lesion centers")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_phantom)

    p = sub.add_parser("detect", parents=[common], help="lesion instances from probability maps")
    p.add_argument("--prob", required=True, help="14-channel probability NIfTI")
    p.add_argument("--factor", type=float, default=1.0, help="lesion sensitivity factor f > 0")
    p.add_argument("--min-volume", type=float, default=0.5, help="smallest kept instance, cm3")
    p.add_argument("--case-id", default=None, help="case id written to the output (default: file stem)")
    p.add_argument("--out", default="-", help="detection JSON path ('-' = stdout)")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("match", parents=[common], help="pair ground truth with predictions")
    p.add_argument("--gt", required=True, help="ground-truth detection JSON or label NIfTI")
    p.add_argument("--pred", required=True, help="predicted detection JSON or label NIfTI")
    p.add_argument("--min-overlap", type=int, default=1, help="minimum shared voxels for a candidate pair")
    p.add_argument("--min-volume", type=float, default=0.5, help="instance size filter for NIfTI inputs, cm3")
    p.add_argument("--out", default="-", help="match report JSON path ('-' = stdout)")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("shuffle", parents=[common], help="write lesion-shuffle patch bundles")
    p.add_argument("--manifest", required=True, help="case manifest JSON")
    p.add_argument("--mode", choices=["train", "infer"], default="train")
    p.add_argument("--det", default=None, help="detections defining the lesions (default: lesions of the reference mask)")
    p.add_argument("--mask", default=None, help="reference label mask (default: manifest gt_mask, else argmax of prob)")
    p.add_argument("--n", type=int, default=10, help="patches per lesion in infer mode")
    p.add_argument("--per-lesion", type=int, default=20, help="patches per lesion and scheme in train mode")
    p.add_argument("--no-shuffle", action="store_true", help="infer mode: orig-pos patches only")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_shuffle)

    p = sub.add_parser("reclassify", parents=[common], help="filter and relabel detections")
    p.add_argument("--det", required=True, help="detection JSON")
    p.add_argument("--manifest", required=True, help="case manifest JSON (images, optional gt)")
    p.add_argument("--mask", default=None, help="reference label mask (default: manifest gt_mask, else argmax of prob)")
    p.add_argument("--segmenter", default="mock:truth", help="mock:truth | mock:null | mock:noisy:<p> | exec:<cmd>")
    p.add_argument("--n", type=int, default=10, help="inference patches per lesion")
    p.add_argument("--threshold", type=float, default=0.5, help="discard below this mean overlap, cm3")
    p.add_argument("--skip-volume", type=float, default=64.0, help="lesions above this volume bypass, cm3")
    p.add_argument("--no-relabel", action="store_true", help="disable relabel voting")
    p.add_argument("--no-shuffle", action="store_true", help="orig-pos inference patches only")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=_jobs_default(), help="worker threads")
    p.add_argument("--out", default="-", help="detection JSON path ('-' = stdout)")
    p.set_defaults(func=cmd_reclassify)

    p = sub.add_parser("classify-patient", parents=[common], help="patient-level class of detection sets")
    p.add_argument("--det", required=True, nargs="+", help="one or more detection JSON files")
    p.add_argument("--joint", action="store_true", help="combine exactly two sets into the joint decision")
    p.add_argument("--out", default="-", help="JSON path ('-' = stdout)")
    p.set_defaults(func=cmd_classify_patient)

    p = sub.add_parser("evaluate", parents=[common], help="lesion and patient metrics")
    p.add_argument("--gt", required=True, nargs="+", help="ground-truth detection files or directories")
    p.add_argument("--pred", required=True, nargs="+", help="prediction files or directories")
    p.add_argument("--mode", choices=["strict", "table", "both"], default="both")
    p.add_argument("--min-overlap", type=int, default=1, help="minimum shared voxels for a candidate pair")
    p.add_argument("--min-volume", type=float, default=0.5, help="instance size filter for NIfTI inputs, cm3")
    p.add_argument("--report", default=None, help="write the EvalReport JSON here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pipeline", parents=[common], help="full cascade over a directory of manifests")
    p.add_argument("--manifest-dir", required=True, help="directory searched for *.manifest.json")
    p.add_argument("--factors", type=_csv_floats, default=[1.0, 4.0], help="comma-separated sensitivity factors")
    p.add_argument("--segmenter", default="mock:truth", help="mock:truth | mock:null | mock:noisy:<p> | exec:<cmd>")
    p.add_argument("--min-volume", type=float, default=0.5, help="smallest kept instance, cm3")
    p.add_argument("--n", type=int, default=10, help="inference patches per lesion")
    p.add_argument("--threshold", type=float, default=0.5, help="discard below this mean overlap, cm3")
    p.add_argument("--skip-volume", type=float, default=64.0, help="lesions above this volume bypass, cm3")
    p.add_argument("--no-reclassify", type=_bool, nargs="?", const=True, default=False, help="stop after seg2det")
    p.add_argument("--no-shuffle", type=_bool, nargs="?", const=True, default=False, help="orig-pos inference patches only")
    p.add_argument("--no-relabel", type=_bool, nargs="?", const=True, default=False, help="disable relabel voting")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=_jobs_default(), help="worker threads")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_pipeline)
    return parser


def read_config_file(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out


def _leaf_parser(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.ArgumentParser:
    """The (sub)parser that will handle ``argv``."""
    current = parser
    for tok in argv:
        actions = [a for a in current._actions if isinstance(a, argparse._SubParsersAction)]
        if not actions:
            break
        if tok in actions[0].choices:
            current = actions[0].choices[tok]
    return current


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    values = read_config_file(known.config)
    leaf = _leaf_parser(parser, argv)
    dests = {a.dest: a for a in leaf._actions}
    unknown = sorted(k for k in values if k not in dests or k in ("config", "help"))
    if unknown:
        raise InputError(f"{known.config}: unknown keys for '{leaf.prog}': {unknown}")
    defaults = {}
    for key, raw in values.items():
        action = dests[key]
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[key] = _bool(raw) if isinstance(action, argparse._StoreTrueAction) else not _bool(raw)
        elif action.nargs in ("+", "*"):
            defaults[key] = raw.split()
        else:
            defaults[key] = raw  # argparse applies ``type`` to string defaults
    leaf.set_defaults(**defaults)
    for key in defaults:
        dests[key].required = False


class _KeyValueFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        msg = record.getMessage().replace('"', "'")
        return f'level={record.levelname} logger={record.name} msg="{msg}"'


def _setup_logging(level: str, debug: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_KeyValueFormatter())
    root = logging.getLogger("livercascade")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if debug else getattr(logging, level))
    root.propagate = False


def _exit_code(exc: BaseException) -> int:
    from .pipeline import StageError

    if isinstance(exc, StageError):
        return _exit_code(exc.cause)
    if isinstance(exc, ContractViolation):
        return EXIT_CONTRACT
    if isinstance(exc, (CascadeError, OSError, ValueError)):
        return EXIT_INPUT
    return EXIT_USAGE


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    debug = "--debug" in argv
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (CascadeError, OSError) as exc:
        print(f"livercascade: error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    _setup_logging(args.log_level, args.debug)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"livercascade: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        if debug:
            raise
        code = _exit_code(exc)
        log.error("%s: %s", type(exc).__name__, exc)
        print(f"livercascade: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
