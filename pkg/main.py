import argparse
import logging
import sys

from config import RunConfig, load_config
from experiments import MIX_PRESETS, parse_weight_spec, run_ablation, run_multi_emotion, run_visualization
from report import write_report
from runner import STAGES, PipelineRunner, StageError
from synthworld import import_quadruplets, make_world, save_dataset

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    handlers=[logging.StreamHandler()],
)

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="KEY=VALUE config file")
    common.add_argument("--seed", type=int, help="global seed (overrides the config file)")
    common.add_argument("--out", help="run directory (overrides output_dir)")

    parser = argparse.ArgumentParser(description="Emotion-conditioned caption and image generation on a synthetic world")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="generate the synthetic train/test quadruplets")
    imp = sub.add_parser("import-data", parents=[common], help="import quadruplets from JSONL")
    imp.add_argument("path", help="JSONL file, image paths relative to it")
    imp.add_argument("--test", help="separate JSONL for the held-out split (default: last quarter of path)")
    sub.add_parser("train-text", parents=[common], help="pre-train the base LM, then train textual tokens and LoRA")
    sub.add_parser("train-diffusion", parents=[common], help="train the denoiser with visual tokens")
    smp = sub.add_parser("sample", parents=[common], help="generate the inference set")
    smp.add_argument("--alpha", type=float, help="injection strength at inference (writes samples-alpha-<a>/)")
    abl = sub.add_parser("ablate", parents=[common], help="run the none/vt/vv/both ablation")
    abl.add_argument("--alpha", type=float, help="injection strength for every configuration")
    vis = sub.add_parser("visualize", parents=[common], help="token-only grid, emotions by seeds")
    vis.add_argument("--seeds", type=int, help="number of seeds (columns)")
    mx = sub.add_parser("mix", parents=[common], help="generate with mixed emotions")
    mx.add_argument("--weights", action="append", help=f"name=w,... (repeatable; default presets {sorted(MIX_PRESETS)})")
    mx.add_argument("--content", default="", help="content condition (default: none)")
    sub.add_parser("eval", parents=[common], help="run every stage through evaluation")
    rep = sub.add_parser("report", parents=[common], help="render metrics CSVs to markdown and bar charts")
    rep.add_argument("--csv", action="append", help="metrics CSV (default: every CSV in <run>/reports)")
    rep.add_argument("--no-plot", action="store_true", help="skip the PNG bar chart")
    return parser


def import_data(config: RunConfig, path: str, test_path: str | None) -> None:
    runner = PipelineRunner(config)
    world = make_world(config.world_seed, {"image_size": config.image_size})
    quadruplets = import_quadruplets(path, world)
    if test_path:
        train, test = quadruplets, import_quadruplets(test_path, world)
    else:
        cut = len(quadruplets) - max(1, len(quadruplets) // 4)
        train, test = quadruplets[:cut], quadruplets[cut:]
    if not train or not test:
        raise ValueError(f"Need at least one train and one test quadruplet, got {len(train)}/{len(test)}")
    save_dataset(world, train, runner.layout.train_dir)
    save_dataset(world, test, runner.layout.test_dir)

    runner.clear_outputs("generate")
    manager = runner.state_manager
    state = manager.forget(manager.get_state(), STAGES)
    manager.mark_completed(state, "gen-data")
    logger.info(f"Imported {len(train)} train and {len(test)} test quadruplets")


def dispatch(args: argparse.Namespace, config: RunConfig) -> None:
    runner = PipelineRunner(config)
    if args.command == "gen-data":
        runner.run(only=["gen-data"])
    elif args.command == "import-data":
        import_data(config, args.path, args.test)
    elif args.command == "train-text":
        runner.run(only=["gen-data", "pretrain-text", "train-text"])
    elif args.command == "train-diffusion":
        runner.run(only=["gen-data", "train-diffusion"])
    elif args.command == "sample":
        if args.alpha is None:
            runner.run(until="generate")
        else:
            runner.sweep_alpha(args.alpha)
    elif args.command == "ablate":
        run_ablation(config, alpha=args.alpha)
    elif args.command == "visualize":
        run_visualization(config.with_overrides(visualization_seeds=args.seeds))
    elif args.command == "mix":
        weight_sets = {spec: parse_weight_spec(spec) for spec in args.weights} if args.weights else None
        run_multi_emotion(config, weight_sets, content=args.content)
    elif args.command == "eval":
        runner.run()
    elif args.command == "report":
        csv_paths = args.csv or sorted(str(p) for p in runner.layout.reports_dir.glob("*.csv"))
        if not csv_paths:
            raise FileNotFoundError(f"No metrics CSV in {runner.layout.reports_dir}")
        for csv_path in csv_paths:
            write_report(csv_path, plot=not args.no_plot)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, seed=args.seed, output_dir=args.out)
    except Exception as e:
        logger.critical(f"Invalid configuration: {e}")
        return 2

    try:
        dispatch(args, config)
    except KeyboardInterrupt:
        logger.info("Keyboard interrupt received, shutting down")
        return 130
    except StageError as e:
        logger.critical(f"Pipeline halted in stage '{e.stage}': {e.cause}")
        return 1
    except Exception as e:
        logger.critical(f"Command '{args.command}' failed: {e}", exc_info=True)
        return 1
    finally:
        logger.info("=" * 60)
        logger.info(f"Command '{args.command}' finished, run directory: {config.run_dir}")
        logger.info("=" * 60)
    return 0


if __name__ == "__main__":
    sys.exit(main())
