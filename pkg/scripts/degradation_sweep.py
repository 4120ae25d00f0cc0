#!/usr/bin/env python3
"""Detector-degradation experiment.

Sweeps the scripted detector's miss probability, builds the memory per
scene, and reports (a) track recall straight after construction and
(b) how many analyze_frame calls a repair sweep needs to reach full
recall. Higher miss rates should cost recall and repair calls.
"""

import argparse

from scenemem import EngineConfig, ScriptedBackend, build_ssm, generate_scene
from scenemem.metrics import recall_sweep, track_recall


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--scenes", type=int, default=10)
    parser.add_argument("--rooms", type=int, default=2)
    parser.add_argument("--objects-per-room", type=int, default=2)
    parser.add_argument("--views-per-room", type=int, default=3)
    parser.add_argument("--miss", type=float, nargs="+",
                        default=[0.0, 0.2, 0.4])
    args = parser.parse_args()

    cfg = EngineConfig()
    print(f"{'miss':>6} {'mean recall':>12} {'mean repair calls':>18}")
    for miss in args.miss:
        recalls, calls = [], []
        for seed in range(args.scenes):
            scene = generate_scene(args.rooms, args.objects_per_room, seed,
                                   views_per_room=args.views_per_room)
            episode = scene.episode()
            backend = ScriptedBackend(scene, miss_prob=miss, seed=100 + seed)
            ssm = build_ssm(episode, backend, cfg)
            recalls.append(track_recall(ssm, scene))
            n, _ = recall_sweep(scene, ssm, episode, backend, cfg)
            calls.append(n)
        print(f"{miss:>6.2f} {sum(recalls) / len(recalls):>12.3f} "
              f"{sum(calls) / len(calls):>18.2f}")


if __name__ == "__main__":
    main()
