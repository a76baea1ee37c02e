import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from .ablations import run_curriculum_ablation, run_mismatch_ablation
from .config import load_config
from .curriculum import (
    DifficultyBand,
    DifficultyConfig,
    StubRefiner,
    dataset_summary,
    dual_end_filter,
    estimate_dataset,
    estimate_difficulty,
    load_dataset,
    write_dataset,
)
from .exceptions import RLVRException
from .policy import PolicyParams, Vocabulary, load_checkpoint
from .tasks import FAMILIES, TaskSpec, generate_dataset
from .trainer import replay, train
from .verifier import StubJudge, verify_records


class RLVRCLI:

    def __init__(self) -> None:

        self.parser = self._build_parser()

    def _build_parser(self) -> argparse.ArgumentParser:

        parser = argparse.ArgumentParser(prog="rlvr", description="Desk-scale curriculum RLVR engine")
        parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
        sub = parser.add_subparsers(dest="command", required=True)

        gen = sub.add_parser("gen-tasks", help="Generate a synthetic task dataset")
        gen.add_argument("--family", choices=FAMILIES, required=True)
        gen.add_argument("--count", type=int, default=100)
        gen.add_argument("--seed", type=int, default=0)
        gen.add_argument("--tier", type=int, default=0)
        gen.add_argument("--digits", type=int, default=1)
        gen.add_argument("--modulus", type=int, default=10)
        gen.add_argument("--length", type=int, default=2)
        gen.add_argument("--out", required=True)

        est = sub.add_parser("estimate-difficulty", help="Annotate a dataset with pass-rate difficulty")
        self._policy_arguments(est)
        est.add_argument("--dataset", required=True)
        est.add_argument("--out", required=True)

        flt = sub.add_parser("filter", help="Dual-end filter a difficulty-annotated dataset")
        self._policy_arguments(flt)
        flt.add_argument("--dataset", required=True)
        flt.add_argument("--band", default="(0.0,0.7]")
        flt.add_argument("--refiner", choices=["stub", "none"], default="stub")
        flt.add_argument("--out-dir", required=True)

        ver = sub.add_parser("verify", help="Grade completions against gold answers")
        ver.add_argument("--input", required=True)
        ver.add_argument("--output", required=True)
        ver.add_argument("--judge", choices=["none", "stub"], default="none")

        trn = sub.add_parser("train", help="Run the staged training loop")
        trn.add_argument("--config", required=True)
        trn.add_argument("--resume", default=None)

        mis = sub.add_parser("ablate-mismatch", help="Mismatch x mask ablation")
        mis.add_argument("--config", required=True)
        mis.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
        mis.add_argument("--sigma", type=float, default=0.2)
        mis.add_argument("--threshold", type=float, default=None)
        mis.add_argument("--sweep", type=float, nargs="*", default=[])

        cur = sub.add_parser("ablate-curriculum", help="Staged plan vs flat plan under equal token budget")
        cur.add_argument("--config", required=True)
        cur.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])

        rep = sub.add_parser("replay", help="Recompute a dumped wave's gradient estimate")
        rep.add_argument("--dump", required=True)
        rep.add_argument("--checkpoint", required=True)
        rep.add_argument("--config", required=True)
        rep.add_argument("--stage", type=int, default=0)
        return parser

    @staticmethod
    def _policy_arguments(parser: argparse.ArgumentParser) -> None:
        parser.add_argument("--checkpoint", default=None, help="Policy checkpoint (zero policy if omitted)")
        parser.add_argument("--context-size", type=int, default=3)
        parser.add_argument("--rollouts", type=int, default=16)
        parser.add_argument("--window", type=int, default=16)
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--protocol", choices=["raw", "boxed"], default="raw")
        parser.add_argument("--workers", type=int, default=1)

    @staticmethod
    def _params(args: argparse.Namespace) -> PolicyParams:
        if args.checkpoint:
            params, _ = load_checkpoint(args.checkpoint)
            return params
        vocab = Vocabulary.text_mode() if args.protocol == "boxed" else Vocabulary.default()
        return PolicyParams.zeros(vocab, args.context_size)

    @staticmethod
    def show_summary(title: str, summary: Dict[str, Any]) -> None:

        print("\n" + "=" * 50)
        print(f"  {title}")
        print("=" * 50)
        for key, value in summary.items():
            print(f"{key:<22} {value}")

    def gen_tasks(self, args: argparse.Namespace) -> None:

        spec = TaskSpec(family=args.family, count=args.count, seed=args.seed, tier=args.tier,
                        digits=args.digits, modulus=args.modulus, length=args.length)
        problems = generate_dataset(spec)
        write_dataset(problems, args.out)
        self.show_summary("Generated Dataset", dataset_summary(problems))

    def estimate_difficulty(self, args: argparse.Namespace) -> None:

        params = self._params(args)
        problems = load_dataset(args.dataset)
        cfg = DifficultyConfig(rollouts=args.rollouts)
        annotated = estimate_dataset(problems, params, cfg, args.window, args.seed, args.protocol, args.workers)
        write_dataset(annotated, args.out)
        self.show_summary("Difficulty Estimates", dataset_summary(annotated))

    def filter(self, args: argparse.Namespace) -> None:

        params = self._params(args)
        problems = load_dataset(args.dataset)
        band = DifficultyBand.parse(args.band)
        refiner = StubRefiner() if args.refiner == "stub" else None

        def reestimate(problem: Any) -> float:
            return estimate_difficulty(problem, params, args.rollouts, args.window, args.seed, args.protocol)

        result = dual_end_filter(problems, band, refiner, reestimate)
        out_dir = Path(args.out_dir)
        for name in result._fields:
            write_dataset(getattr(result, name), out_dir / f"{name}.jsonl")
        self.show_summary("Filter Partitions", {name: len(getattr(result, name)) for name in result._fields})
        self.show_summary("Kept Problems", dataset_summary(result.kept))

    def verify(self, args: argparse.Namespace) -> None:

        judge = StubJudge() if args.judge == "stub" else None
        graded = verify_records(args.input, args.output, judge)
        summary: Dict[str, Any] = {"records": len(graded)}
        if len(graded):
            summary["mean_aggregate"] = float(graded["aggregate"].mean())
        self.show_summary("Verification", summary)

    def train(self, args: argparse.Namespace) -> None:

        cfg = load_config(args.config)
        result = train(cfg, resume=args.resume)
        summary: Dict[str, Any] = {
            "steps": result.state.global_step,
            "tokens": result.state.tokens,
            "final_checkpoint": result.final_checkpoint,
            "checksum": result.params.checksum(),
        }
        if result.records:
            summary["final_mean_reward"] = f"{result.records[-1].mean_reward:.4f}"
        if result.stopped_by_budget:
            summary["stopped_by"] = "token budget"
        self.show_summary("Training Complete", summary)

    def ablate_mismatch(self, args: argparse.Namespace) -> None:

        cfg = load_config(args.config)
        report = run_mismatch_ablation(cfg, args.seeds, args.sigma, args.threshold, args.sweep)
        threshold = args.threshold if args.threshold is not None else cfg.plan.stages[0].estimator.mis_threshold
        print(report.summary().to_string(index=False))
        print(f"\nCollapsed without the mask and stable with C={threshold} on "
              f"{report.stabilized_seeds(threshold)} of {len(args.seeds)} seeds")

    def ablate_curriculum(self, args: argparse.Namespace) -> None:

        cfg = load_config(args.config)
        report = run_curriculum_ablation(cfg, args.seeds)
        print(report.summary().to_string(index=False))
        print(f"\nCurriculum arm ahead of flat on {report.paired_wins()} of {len(args.seeds)} seeds "
              f"({report.paired_ties()} ties)")
        print(f"Length grows across stages while flat stays level on {report.length_trend_seeds()} seeds")

    def replay(self, args: argparse.Namespace) -> None:

        cfg = load_config(args.config)
        if not 0 <= args.stage < len(cfg.plan):
            raise RLVRException(f"Stage {args.stage} is not in the plan")
        params, _ = load_checkpoint(args.checkpoint)
        estimate = replay(args.dump, params, cfg.plan.stages[args.stage].estimator, cfg.protocol)
        self.show_summary("Replay", {
            "objective": repr(estimate.objective),
            "grad_norm": repr(estimate.grad_norm),
            "kept": estimate.kept_count,
            "masked": estimate.masked_count,
            "masked_fraction": f"{estimate.masked_fraction:.4f}",
        })

    def run(self, argv: Optional[Sequence[str]] = None) -> int:

        args = self.parser.parse_args(argv)
        logging.getLogger().setLevel(args.log_level)
        handler = getattr(self, args.command.replace("-", "_"))
        try:
            handler(args)
        except RLVRException as e:
            print(f"error: {type(e).__name__}: {e.message}", file=sys.stderr)
            return 1
        except Exception as e:
            print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
            return 2
        return 0


def main(argv: Optional[List[str]] = None) -> None:

    sys.exit(RLVRCLI().run(argv))
