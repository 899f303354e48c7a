"""Walk through the whole pipeline on a synthetic world and print a results table.

    python3 demos/synthetic_benchmark.py --videos 80 --epochs 4

The default sizes match the acceptance benchmark and take several minutes on one core.
"""
import argparse
import time

import numpy as np

from stitchdemo.evaluator import EvaluatorConfig, train
from stitchdemo.harness import (
    baseline_similarity_rank,
    baseline_text_only_rank,
    build_all_distractors,
    capture_curve,
    evaluator_scorer,
    rank_sets,
)
from stitchdemo.negatives import NegativeGenerator, PoolIndex
from stitchdemo.synth import SynthConfig, make_world, real_video_samples


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--videos", type=int, default=200)
    ap.add_argument("--train-queries", type=int, default=300)
    ap.add_argument("--test-queries", type=int, default=100)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    t0 = time.perf_counter()
    world = make_world(SynthConfig(n_videos=args.videos, seed=args.seed), args.train_queries, args.test_queries)
    print(f"{len(world.corpus)} videos, {len(world.pool)} localized steps, "
          f"{len(world.train)} train / {len(world.test)} test queries")

    print("\nground-truth capture by K")
    for row in capture_curve(world.test, world.pool, (1, 10, 100)):
        print("  " + "  ".join(f"{k}={v:.2f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))

    sets = build_all_distractors(world.test, world.corpus, world.pool, seed=args.seed)
    positives = world.train + real_video_samples(world, np.random.default_rng(args.seed + 1))
    config = EvaluatorConfig(feature_dim=world.corpus.dim, model_dim=world.corpus.dim,
                             epochs=args.epochs, seed=args.seed)
    result = train(config, world.corpus, positives, NegativeGenerator(PoolIndex(world.pool)))
    print(f"\ntrained on {len(positives)} positives, final loss {result.losses[-1]:.4f}")

    reports = [
        baseline_similarity_rank(sets, world.corpus),
        baseline_text_only_rank(sets, world.corpus),
        rank_sets("evaluator", sets, evaluator_scorer(result.model, world.corpus)),
    ]
    print(f"\n{'method':<12}{'MR':>8}{'R@1':>8}{'R@5':>8}{'R@50':>8}")
    for r in reports:
        row = r.row()
        print(f"{row['method']:<12}{row['MR']:>8g}{row['R@1']:>8.2f}{row['R@5']:>8.2f}{row['R@50']:>8.2f}")
    print(f"\n{time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
