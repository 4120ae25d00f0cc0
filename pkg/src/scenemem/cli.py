"""Command-line interface.

Subcommands:
  synth    generate a synthetic scene: manifest + depth PNGs + truth + questions
  build    construct a memory from a dataset manifest and persist it
  ask      answer one question against a persisted memory
  eval     run the synthetic evaluation and write a metrics report
  inspect  dump a persisted memory's canonical JSON
  serve    read-only HTTP endpoints over a persisted memory
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import depthio
from .backend import Backend, HttpBackend
from .config import EngineConfig, load_config
from .dataset import Episode, load_dataset
from .loop import EpisodeQuery, answer, write_transcript
from .memory import load_dir, save_dir, serialize
from .metrics import evaluate
from .pipeline import build_ssm
from .scripted import RuleReasoner, ScriptedBackend
from .server import serve_dir
from .synth import (SyntheticScene, generate_questions, generate_scene,
                    load_questions, save_questions)


def _engine_config(args) -> EngineConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else EngineConfig()
    if getattr(args, "k", None) is not None:
        cfg.frame_stride = args.k
    if getattr(args, "n_img", None) is not None:
        cfg.initial_frames = args.n_img
    if getattr(args, "m", None) is not None:
        cfg.max_api_calls = args.m
    if getattr(args, "api", None) is not None:
        cfg.api_mode = args.api
    return cfg


def _backend(args, cfg: EngineConfig, episode: Episode | None = None) -> Backend:
    if getattr(args, "backend_url", None):
        sizes = episode.frame_sizes() if episode is not None else None
        return HttpBackend(args.backend_url, frame_sizes=sizes)
    if getattr(args, "scripted", None):
        scene = SyntheticScene.load(args.scripted)
        return ScriptedBackend(scene, reasoner=RuleReasoner(),
                               seed=getattr(args, "seed", 0) or 0,
                               embedding_dim=cfg.embedding_dim,
                               fixtures=getattr(args, "fixtures", None))
    raise SystemExit("need --backend-url or --scripted <truth.json>")


def cmd_synth(args) -> int:
    scene = generate_scene(args.rooms, args.objects_per_room, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    depth_dir = out / "depth"
    depth_dir.mkdir(exist_ok=True)
    episode = scene.episode()
    with (out / "manifest.jsonl").open("w", encoding="utf-8") as fh:
        for frame in episode.frames:
            depth_name = f"depth/{frame.id:04d}.png"
            depthio.write_depth_png(out / depth_name, frame.depth.values)
            rot = frame.pose.rotation.reshape(-1).tolist()
            fh.write(json.dumps({
                "id": frame.id,
                "image": frame.image_locator,
                "depth": depth_name,
                "pose": {"rotation": rot,
                         "translation": frame.pose.translation.tolist()},
                "intrinsics": {"fx": frame.intrinsics.fx, "fy": frame.intrinsics.fy,
                               "cx": frame.intrinsics.cx, "cy": frame.intrinsics.cy,
                               "width": frame.intrinsics.width,
                               "height": frame.intrinsics.height},
                "timestamp": frame.timestamp,
            }) + "\n")
    scene.save(out / "truth.json")
    save_questions(generate_questions(scene), out / "questions.json")
    print(f"wrote scene '{scene.scene_id}': {len(episode)} frames, "
          f"{len(scene.objects)} objects, {len(scene.relations)} relations -> {out}")
    return 0


def cmd_build(args) -> int:
    cfg = _engine_config(args)
    if args.dataset:
        scene_id = (SyntheticScene.load(args.scripted).scene_id
                    if args.scripted else None)
        episode = load_dataset(args.dataset, cfg.frame_stride, scene_id=scene_id)
    elif args.scripted:
        episode = SyntheticScene.load(args.scripted).episode()
    else:
        raise SystemExit("need --dataset <manifest> or --scripted <truth.json>")
    backend = _backend(args, cfg, episode)
    ssm = build_ssm(episode, backend, cfg)
    save_dir(ssm, args.out)
    if ssm.rooms is not None:  # occupancy dumps for floor-plan debugging
        for floor_id, grid in ssm.rooms.grids.items():
            depthio.write_pgm(Path(args.out) / f"occupancy_{floor_id}.pgm",
                              grid.occupancy.free)
    print(f"built memory for '{ssm.scene_id}': {len(ssm.graph.tracks)} tracks, "
          f"{len(ssm.graph.edges)} edges, {len(ssm.nav_log)} nav entries -> {args.out}")
    return 0


def cmd_ask(args) -> int:
    cfg = _engine_config(args)
    ssm = load_dir(args.ssm)
    if args.dataset:
        episode = load_dataset(args.dataset, ssm.stride)
    elif args.scripted:
        episode = SyntheticScene.load(args.scripted).episode()
    else:
        raise SystemExit("need --dataset or --scripted to resolve frames")
    backend = _backend(args, cfg, episode)
    query = EpisodeQuery(question=args.question, max_calls=cfg.max_api_calls,
                         scene_id=ssm.scene_id)
    result = answer(query, ssm, episode, backend, cfg)
    doc = result.to_doc()
    print(json.dumps(doc, indent=2, sort_keys=True))
    if args.transcript:
        write_transcript(result, args.transcript)
    return 0


def cmd_eval(args) -> int:
    cfg = _engine_config(args)
    scene = SyntheticScene.load(args.scene)
    questions = (load_questions(args.questions) if args.questions
                 else generate_questions(scene))
    backend = ScriptedBackend(scene, reasoner=RuleReasoner(), seed=args.seed,
                              miss_prob=args.miss_prob,
                              embedding_dim=cfg.embedding_dim)
    report = evaluate(scene, questions, backend, cfg)
    text = json.dumps(report.to_doc(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        print(f"wrote metrics report -> {args.out}")
    else:
        print(text)
    return 0


def cmd_inspect(args) -> int:
    ssm = load_dir(args.ssm)
    text, refs = serialize(ssm)
    sys.stdout.write(text)
    if args.frames:
        for fid, locator in refs:
            print(f"frame {fid}: {locator}", file=sys.stderr)
    return 0


def cmd_serve(args) -> int:
    serve_dir(args.ssm, host=args.host, port=args.port)
    return 0


def _add_common(p: argparse.ArgumentParser, *, loop_flags: bool = False) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--k", type=int, help="frame stride")
    p.add_argument("--n-img", dest="n_img", type=int, help="initial frame memory size")
    if loop_flags:
        p.add_argument("--m", type=int, help="maximum API calls per question")
        p.add_argument("--api", choices=("frame", "node", "image"),
                       help="which modifiability APIs the reasoner may use")
    p.add_argument("--backend-url", help="HTTP backend base URL")
    p.add_argument("--scripted", help="synthetic truth.json for the scripted backend")
    p.add_argument("--fixtures", help="digest->response overrides (JSONL, "
                                      "same format as recorded logs)")
    p.add_argument("--seed", type=int, default=0)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="scenemem",
                                     description="editable 3D scene memory engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    p.add_argument("--rooms", type=int, default=2)
    p.add_argument("--objects-per-room", dest="objects_per_room", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build", help="construct and persist a memory")
    p.add_argument("--dataset", help="manifest.jsonl path")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("ask", help="answer a question against a persisted memory")
    p.add_argument("--ssm", required=True, help="persisted memory directory")
    p.add_argument("--question", required=True)
    p.add_argument("--dataset", help="manifest.jsonl path")
    p.add_argument("--transcript", help="write the loop transcript here (JSONL)")
    _add_common(p, loop_flags=True)
    p.set_defaults(func=cmd_ask)

    p = sub.add_parser("eval", help="synthetic evaluation with metrics report")
    p.add_argument("--scene", required=True, help="truth.json path")
    p.add_argument("--questions", help="questions.json (defaults to generated)")
    p.add_argument("--miss-prob", dest="miss_prob", type=float, default=0.0)
    p.add_argument("--out", help="metrics report output path")
    _add_common(p, loop_flags=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="dump canonical JSON")
    p.add_argument("--ssm", required=True)
    p.add_argument("--frames", action="store_true",
                   help="also list frame references on stderr")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("serve", help="read-only HTTP inspection service")
    p.add_argument("--ssm", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    p.set_defaults(func=cmd_serve)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
