import argparse
import functools
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from config import RELAXED_TOLERANCE, ConfigError, RunConfig, resolve_config
from model_store import (Diagnostic, ModelBundle, ModelStoreError, Severity,
                         load_model, save_model, validate_model)
from pruning.layer_graph import LayerGraphError, group_layers, groups_document
from pruning.metrics_report import (MetricsError, bundle_report,
                                    format_census, format_report_table,
                                    kernel_census, model_report,
                                    pattern_histogram, report_document)
from pruning.pattern_library import (DEFAULT_DICT_SIZES, DictSizeTooLarge,
                                     PatternDictionary, PatternLibraryError,
                                     Variant, calibrate_dictionary,
                                     filtered_candidates, generate_candidates,
                                     load_dictionary, save_dictionary)
from pruning.pruning_engine import (PruneResult, PruningError,
                                    load_assignments, prune_model,
                                    save_assignments)
from pruning.reference_executor import (ExecutorError, MissingAssignment,
                                        ShapeMismatch, load_feature_map,
                                        save_feature_map, verify_equivalence)
from pruning.synthetic import SyntheticKind, build_synthetic, random_feature_map

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

logger = logging.getLogger(__name__)


class StageError(Exception):
    """A pipeline failure tagged with the stage that raised it"""

    def __init__(self, stage: str, message: str, exit_code: int = EXIT_FAILURE):
        super().__init__(message)
        self.stage = stage
        self.exit_code = exit_code


def exit_coded(command: Callable[..., int]) -> Callable[..., int]:
    """Turn StageError into a tagged message and its exit code"""

    @functools.wraps(command)
    def wrapper(*args: Any, **kwargs: Any) -> int:
        try:
            return command(*args, **kwargs)
        except StageError as e:
            print(f"[{e.stage}] {str(e)}", file=sys.stderr)
            return e.exit_code

    return wrapper


def sidecar(path: Path, suffix: str) -> Path:
    """<path><suffix>, e.g. model.rtoss.assignments.json"""
    return path.with_name(path.name + suffix)


def _require(config: RunConfig, stage: str, *fields: str) -> None:
    missing = [f"--{name}" for name in fields if getattr(config, name) is None]
    if missing:
        raise StageError(stage, f"Missing required option(s): {', '.join(missing)}", EXIT_USAGE)


def _load(path: Path) -> ModelBundle:
    try:
        return load_model(path)
    except ModelStoreError as e:
        raise StageError("load", f"{type(e).__name__}: {str(e)}", EXIT_USAGE) from e


def _load_warnings(bundle: ModelBundle) -> List[Diagnostic]:
    return [d for d in validate_model(bundle) if d.severity is Severity.WARNING]


def _write(path: Path, text: str, stage: str) -> None:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise StageError(stage, f"Failed to write {path}: {str(e)}") from e


def _calibrate(config: RunConfig, variant: Variant, dict_size: int) -> PatternDictionary:
    try:
        return calibrate_dictionary(
            variant,
            trials=config.trials,
            seed=config.seed,
            dict_size=dict_size,
            adjacency=config.adjacency,
            threads=config.threads,
        )
    except DictSizeTooLarge as e:
        raise StageError("patterns", str(e), EXIT_USAGE) from e
    except PatternLibraryError as e:
        raise StageError("patterns", str(e)) from e


def _dictionary_for(config: RunConfig) -> Tuple[PatternDictionary, RunConfig, bool]:
    """
    The dictionary a prune run uses, the config updated to match it, and
    whether it was calibrated in this process.
    """
    if config.dictionary is None:
        print(
            f"No --dict given; calibrating {config.resolved_variant.value} "
            f"({config.trials} trials, seed {config.seed})..."
        )
        dictionary = _calibrate(config, config.resolved_variant, config.resolved_dict_size)
        return dictionary, config, True

    try:
        dictionary = load_dictionary(config.dictionary)
    except PatternLibraryError as e:
        raise StageError("load", f"{type(e).__name__}: {str(e)}", EXIT_USAGE) from e
    if config.variant is not None and config.variant is not dictionary.variant:
        raise StageError(
            "patterns",
            f"Variant {config.variant.value} does not match dictionary "
            f"{config.dictionary} ({dictionary.variant.value})",
            EXIT_USAGE,
        )
    updated = config.model_copy(
        update={"variant": dictionary.variant, "dict_size": len(dictionary.masks)}
    )
    return dictionary, updated, False


def _prune(bundle: ModelBundle, dictionary: PatternDictionary, config: RunConfig) -> PruneResult:
    try:
        group_set = group_layers(bundle)
        return prune_model(
            bundle,
            group_set,
            dictionary,
            sharing=config.mask_sharing,
            exempt_short_layers=config.exempt_short_layers,
            threads=config.threads,
        )
    except (LayerGraphError, PruningError) as e:
        raise StageError("prune", f"{type(e).__name__}: {str(e)}") from e


@exit_coded
def cmd_patterns(config: RunConfig) -> int:
    """Calibrate a pattern dictionary and write it out"""
    variant = config.resolved_variant
    k = variant.entry_count
    try:
        candidates = generate_candidates(k)
        survivors = filtered_candidates(variant, config.adjacency)
    except PatternLibraryError as e:
        raise StageError("patterns", str(e)) from e

    print(f"\nVariant {variant.value}: {len(candidates)} candidate masks")
    print(f"After {config.adjacency.value} filtering: {len(survivors)}")

    dictionary = _calibrate(config, variant, config.resolved_dict_size)
    wins = dictionary.calibration.wins
    print(f"\nSelected {len(dictionary.masks)} masks ({config.trials} trials, seed {config.seed}):")
    for mask in dictionary.masks:
        grid = " | ".join(mask.render().splitlines())
        print(f"  id {mask.id:>3}  bits {mask.bits:03x}  wins {wins.get(mask.id, 0):>6}  {grid}")

    out = config.out or config.dictionary or Path(f"patterns_{variant.value.lower()}.json")
    try:
        save_dictionary(dictionary, out, config.provenance())
    except PatternLibraryError as e:
        raise StageError("patterns", str(e)) from e
    print(f"\nDictionary written to {out}")
    return EXIT_OK


@exit_coded
def cmd_prune(config: RunConfig) -> int:
    """Prune a model and write the bundle, assignments, groups and report"""
    _require(config, "prune", "model", "out")
    assert config.model is not None and config.out is not None
    bundle = _load(config.model)
    warnings = _load_warnings(bundle)
    dictionary, config, calibrated = _dictionary_for(config)
    result = _prune(bundle, dictionary, config)

    try:
        report = model_report(
            result,
            config.input_spatial,
            original=bundle,
            include_non_prunable=config.include_non_prunable,
        )
        document = report_document(
            report,
            kernel_census(bundle),
            pattern_histogram(result),
            warnings,
            config.provenance(),
        )
    except MetricsError as e:
        raise StageError("report", str(e)) from e

    out = config.out
    try:
        save_model(result.bundle, out)
        save_assignments(result, sidecar(out, ".assignments.json"))
    except (ModelStoreError, PruningError) as e:
        raise StageError("prune", str(e)) from e
    _write(sidecar(out, ".groups.json"), groups_document(result.group_set), "prune")
    if calibrated:
        try:
            save_dictionary(dictionary, sidecar(out, ".dict.json"), config.provenance())
        except PatternLibraryError as e:
            raise StageError("patterns", str(e)) from e
    report_path = config.report or sidecar(out, ".report.json")
    _write(report_path, document, "report")

    print()
    print(format_report_table(report, f"Pruning Report ({dictionary.variant.value})"))
    print(f"\nPruned model written to {out}")
    print(f"Report written to {report_path}")
    return EXIT_OK


@exit_coded
def cmd_report(config: RunConfig) -> int:
    """Print stats for any bundle, pruned or not"""
    _require(config, "report", "model")
    assert config.model is not None
    bundle = _load(config.model)
    try:
        report = bundle_report(bundle, config.input_spatial, config.include_non_prunable)
        census = kernel_census(bundle)
    except MetricsError as e:
        raise StageError("report", str(e)) from e

    print()
    print(format_report_table(report, f"Model Report: {config.model.name}"))
    print(format_census(census))
    if config.report is not None:
        document = report_document(
            report, census, diagnostics=_load_warnings(bundle), config=config.provenance()
        )
        _write(config.report, document, "report")
        print(f"\nReport written to {config.report}")
    return EXIT_OK


@exit_coded
def cmd_verify(config: RunConfig) -> int:
    """Check the pattern-grouped executor against the dense one on a pruned model"""
    _require(config, "verify", "model", "out", "input")
    assert config.model is not None and config.out is not None and config.input is not None
    original = _load(config.model)
    pruned = _load(config.out)
    try:
        feature_map = load_feature_map(config.input)
    except ExecutorError as e:
        raise StageError("load", f"{type(e).__name__}: {str(e)}", EXIT_USAGE) from e
    assignments_path = config.assignments or sidecar(config.out, ".assignments.json")
    try:
        dictionary, assignments = load_assignments(assignments_path)
        group_set = group_layers(pruned)
    except (PruningError, LayerGraphError) as e:
        raise StageError("load", f"{type(e).__name__}: {str(e)}", EXIT_USAGE) from e

    result = PruneResult(
        bundle=pruned,
        assignments=tuple(assignments),
        dictionary=dictionary,
        group_set=group_set,
    )
    try:
        verdict = verify_equivalence(original, result, feature_map, config.tolerance)
    except ShapeMismatch as e:
        raise StageError("verify", f"ShapeMismatch: {str(e)}", EXIT_USAGE) from e
    except MissingAssignment as e:
        raise StageError("verify", f"MissingAssignment: {str(e)}") from e
    except ExecutorError as e:
        raise StageError("verify", str(e)) from e

    mode = "bit-exact" if config.tolerance == 0.0 else f"tolerance {config.tolerance:g}"
    print(f"\nVerification ({mode}):")
    for layer in verdict.layers:
        status = "ok" if layer.executors_match and not layer.mask_violations else "FAIL"
        path = "pattern" if layer.pattern_path else "dense"
        note = " (synthetic input)" if layer.synthetic_input else ""
        print(
            f"  {layer.layer:<20} {path:<8} {status:<5} "
            f"violations {layer.mask_violations:>5}  "
            f"deviation {layer.deviation_from_original:.6g}{note}"
        )
    trace = verdict.trace
    if trace.macs_dense:
        print(
            f"MACs performed {trace.macs_performed:,} / {trace.macs_dense:,} "
            f"(skipped {trace.macs_skipped / trace.macs_dense:.2%})"
        )
    print(f"Max deviation from original: {verdict.max_deviation_from_original:.6g}")

    if not verdict.equivalent:
        failed = ", ".join(v.layer for v in verdict.failures)
        print(f"[verify] Executors disagree or masks violated in: {failed}", file=sys.stderr)
        return EXIT_FAILURE
    print("Executors agree")
    return EXIT_OK


@exit_coded
def cmd_synth(config: RunConfig, kind: SyntheticKind, layers: int) -> int:
    """Write a seeded synthetic model, plus an input feature map when --input is given"""
    _require(config, "synth", "out")
    assert config.out is not None
    try:
        bundle = build_synthetic(kind, layers, config.seed)
    except (ValueError, ModelStoreError) as e:
        raise StageError("synth", str(e), EXIT_USAGE) from e
    try:
        save_model(bundle, config.out)
    except ModelStoreError as e:
        raise StageError("synth", str(e)) from e
    print(f"Synthetic {kind.value} model with {len(bundle.layers)} layers written to {config.out}")

    if config.input is not None:
        height, width = config.input_spatial
        feature_map = random_feature_map(bundle.layers[0].in_channels, height, width, config.seed)
        try:
            save_feature_map(feature_map, config.input)
        except ExecutorError as e:
            raise StageError("synth", str(e)) from e
        print(f"Input feature map {feature_map.values.shape} written to {config.input}")
    return EXIT_OK


@exit_coded
def cmd_sweep(config: RunConfig) -> int:
    """Prune one model with every variant and compare the results"""
    _require(config, "sweep", "model")
    assert config.model is not None
    bundle = _load(config.model)

    rows: List[Tuple[Variant, float, float, float]] = []
    for variant in Variant:
        dictionary = _calibrate(config, variant, DEFAULT_DICT_SIZES[variant])
        result = _prune(bundle, dictionary, config.with_variant(variant))
        try:
            report = model_report(
                result, config.input_spatial, bundle, config.include_non_prunable
            )
        except MetricsError as e:
            raise StageError("report", str(e)) from e
        mac_reduction = report.mac_dense / max(report.mac_sparse, 1)
        rows.append((variant, report.reduction_ratio, report.sparsity, mac_reduction))

    print("\n" + "=" * 50)
    print(f"Variant Sweep: {config.model.name}")
    print("=" * 50)
    print(f"{'variant':<8} {'ratio':>10} {'sparsity':>10} {'MAC x':>10}")
    for variant, ratio, sparsity, mac_reduction in rows:
        print(f"{variant.value:<8} {ratio:>10.3f} {sparsity:>10.2%} {mac_reduction:>10.3f}")
    print("=" * 50)
    return EXIT_OK


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--variant", help="Pattern variant: 2EP, 3EP, 4EP or 5EP")
    parser.add_argument("--dict-size", type=int, help="Masks kept per dictionary")
    parser.add_argument("--trials", type=int, help="Random kernels used for calibration")
    parser.add_argument("--seed", type=int, help="Calibration / synthesis seed")
    parser.add_argument("--threads", type=int, help="Worker threads (never changes outputs)")
    parser.add_argument("--mask-sharing", choices=["per_kernel", "layer_shared"])
    parser.add_argument("--adjacency", choices=["connected_component", "any_adjacent_pair"])
    parser.add_argument(
        "--strict-paper",
        action="store_true",
        default=None,
        help="Layer-shared masks and any-adjacent-pair filtering",
    )
    parser.add_argument(
        "--no-exempt-short-layers",
        dest="exempt_short_layers",
        action="store_const",
        const=False,
        help="Zero 1x1 layers with fewer than 9 weights instead of skipping them",
    )
    parser.add_argument(
        "--include-non-prunable",
        action="store_const",
        const=True,
        help="Count non-prunable layers in the reduction ratio",
    )
    parser.add_argument(
        "--input-spatial",
        nargs=2,
        type=int,
        metavar=("H", "W"),
        help="Feature map size used for MAC estimates (default 16 16)",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Pattern-based semi-structured pruning for convolutional models",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="Settings fall back to RTOSS_* environment variables (and .env), then defaults.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    patterns = subparsers.add_parser("patterns", help="Calibrate a pattern dictionary")
    patterns.add_argument("--out", type=Path, help="Dictionary file to write")

    prune = subparsers.add_parser("prune", help="Prune a model bundle")
    prune.add_argument("--model", type=Path, required=True)
    prune.add_argument("--out", type=Path, required=True)
    prune.add_argument("--dict", dest="dictionary", type=Path, help="Calibrated dictionary")
    prune.add_argument("--report", type=Path, help="Report file (default <out>.report.json)")

    report = subparsers.add_parser("report", help="Print stats for a model bundle")
    report.add_argument("--model", type=Path, required=True)
    report.add_argument("--report", type=Path, help="Also write the report document")

    verify = subparsers.add_parser("verify", help="Check executors agree on a pruned model")
    verify.add_argument("--model", type=Path, required=True, help="Original bundle")
    verify.add_argument("--out", type=Path, required=True, help="Pruned bundle")
    verify.add_argument("--input", type=Path, required=True, help="Feature map file")
    verify.add_argument("--assignments", type=Path, help="Default <out>.assignments.json")
    verify.add_argument("--tolerance", type=float, help="0 means bit-exact (default)")
    verify.add_argument(
        "--relaxed",
        dest="tolerance",
        action="store_const",
        const=RELAXED_TOLERANCE,
        help=f"Compare with tolerance {RELAXED_TOLERANCE:g}",
    )

    synth = subparsers.add_parser("synth", help="Write a seeded synthetic model")
    synth.add_argument("--kind", choices=[k.value for k in SyntheticKind], default="chain3x3")
    synth.add_argument("--layers", type=int, default=4)
    synth.add_argument("--out", type=Path, required=True)
    synth.add_argument("--input", type=Path, help="Also write a matching feature map")

    sweep = subparsers.add_parser("sweep", help="Compare all variants on one model")
    sweep.add_argument("--model", type=Path, required=True)

    for subparser in (patterns, prune, report, verify, synth, sweep):
        _add_common(subparser)
    return parser


def cli_values(args: argparse.Namespace) -> Dict[str, Any]:
    """Parsed flags that map onto RunConfig fields"""
    values = {name: getattr(args, name, None) for name in RunConfig.model_fields}
    if values.get("input_spatial") is not None:
        values["input_spatial"] = tuple(values["input_spatial"])
    return values


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main function to run the pipeline"""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )

    try:
        config = resolve_config(cli_values(args))
    except ConfigError as e:
        print(f"[{args.command}] {str(e)}", file=sys.stderr)
        return EXIT_USAGE

    if args.command == "patterns":
        return cmd_patterns(config)
    if args.command == "prune":
        return cmd_prune(config)
    if args.command == "report":
        return cmd_report(config)
    if args.command == "verify":
        return cmd_verify(config)
    if args.command == "synth":
        return cmd_synth(config, SyntheticKind(args.kind), args.layers)
    return cmd_sweep(config)


if __name__ == "__main__":
    sys.exit(main())
