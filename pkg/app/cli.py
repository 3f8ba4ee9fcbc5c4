"""draft-lab 명령줄 인터페이스

모든 서브커맨드는 --config PATH --seed INT --out DIR을 받는다.
종료 코드: 0 성공, 1 검증 오류, 2 수치 실패.
"""

import argparse
import json
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Type, TypeVar

import numpy as np
import pydantic
from pydantic import BaseModel

from app.config import settings
from app.core.checkpoint import set_debug_replay
from app.core.errors import LabError, NumericalError, ValidationError
from app.core.tensor import set_precision
from app.schemas.config import (
    DatasetConfig,
    DiagConfig,
    DoodlConfig,
    EvalConfig,
    FinetuneConfig,
    GradCheckConfig,
    PretrainConfig,
    SampleConfig,
    ToyTrainConfig,
    WindowConfig,
)
from app.services.dataset import gen_dataset, obtain_dataset, preview_items, save_dataset
from app.services.denoiser import (
    Context,
    DenoiserParams,
    attach_adapters,
    init_denoiser,
    load_adapters,
    load_denoiser,
    save_adapters,
    save_denoiser,
)
from app.services.diagnostics import clip_ablation, finetune_config_from, k_trend, plot_k_trend, variance_report
from app.services.finetune import draw_contexts, finetune, pretrain, reward_trend
from app.services.latent_opt import doodl_optimize
from app.services.pipeline import (
    eval_model,
    export_samples,
    generate_samples,
    grad_check,
    load_model,
    lora_mix_table,
    lora_scale_table,
    lora_window_table,
    write_manifest,
)
from app.services.rewards import build_rewards, to_unit_range
from app.services.schedule import NoiseSchedule, make_schedule, schedule_from_meta
from app.services.toy_models import ToyKind, save_toy, train_toy
from app.utils.checkpoint_io import tensors_digest
from app.utils.images import make_grid, write_png, write_ppm
from app.utils.logger import get_logger, set_level
from app.utils.metrics import MetricsWriter, write_jsonl
from app.utils.rng import KeyedRng
from app.utils.run_config import load_run_config

logger = get_logger("draft-lab")

ConfigT = TypeVar("ConfigT", bound=BaseModel)
Handler = Callable[[argparse.Namespace], int]

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out) if args.out else Path(settings.ARTIFACT_DIR) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(model: Type[ConfigT], args: argparse.Namespace, **extra: object) -> ConfigT:
    overrides: Dict[str, object] = {"seed": args.seed, **extra}
    return load_run_config(model, args.config, overrides)


def _print_table(rows: Sequence[Dict[str, object]]) -> None:
    for row in rows:
        print(json.dumps(row, sort_keys=True))


# ---------------------------------------------------------------------------
# 서브커맨드
# ---------------------------------------------------------------------------

def cmd_gen_dataset(args: argparse.Namespace) -> int:
    config = _config(DatasetConfig, args)
    out = _out_dir(args)
    dataset = gen_dataset(config.seed, config.dataset_size, config.image_size)
    path = out / "dataset.ckpt"
    save_dataset(str(path), dataset)
    outputs = [str(path)]
    if config.preview:
        grid = make_grid(preview_items(dataset, config.preview))
        outputs.append(str(write_ppm(out / "preview.ppm", grid)))
        outputs.append(str(write_png(out / "preview.png", grid)))
    write_manifest(out, "gen-dataset", config, {"dataset": str(path)}, outputs)
    print(json.dumps({"n": len(dataset), "class_counts": dataset.class_counts(),
                      "mean_pixel": float(dataset.images.mean())}, sort_keys=True))
    return EXIT_OK


def cmd_pretrain(args: argparse.Namespace) -> int:
    config = _config(PretrainConfig, args)
    out = _out_dir(args)
    dataset = obtain_dataset(config.dataset, config.seed, config.dataset_size, config.image_size)
    schedule = make_schedule(config.n_train, config.sampler_steps)
    params = init_denoiser(config.architecture(), config.seed)
    with MetricsWriter(out) as writer:
        records = pretrain(params, config, dataset, schedule, writer)
    ckpt = out / "denoiser.ckpt"
    save_denoiser(str(ckpt), params, schedule)
    sources = {"denoiser": str(ckpt), **({"dataset": config.dataset} if config.dataset else {})}
    write_manifest(out, "pretrain", config, sources, [str(ckpt)], str(writer.path))
    print(json.dumps({"final_loss": records[-1].loss, "steps": len(records)}))
    return EXIT_OK


def _cmd_toy(kind: ToyKind) -> Handler:
    def run(args: argparse.Namespace) -> int:
        config = _config(ToyTrainConfig, args)
        out = _out_dir(args)
        dataset = obtain_dataset(config.dataset, config.seed, config.dataset_size, config.image_size)
        with MetricsWriter(out) as writer:
            net, score = train_toy(kind, config, dataset, writer)
        ckpt = out / f"{kind}.ckpt"
        save_toy(str(ckpt), net)
        sources = {kind: str(ckpt), **({"dataset": config.dataset} if config.dataset else {})}
        write_manifest(out, f"train-{kind}", config, sources, [str(ckpt)], str(writer.path))
        metric = "accuracy" if kind == "classifier" else "mse"
        print(json.dumps({metric: score}))
        return EXIT_OK

    return run


def cmd_finetune(args: argparse.Namespace) -> int:
    config = _config(FinetuneConfig, args)
    out = _out_dir(args)
    base, meta = load_denoiser(config.base_checkpoint)
    schedule = schedule_from_meta(meta["schedule"], config.sampler_steps)
    params = attach_adapters(base, config.lora_rank, config.seed)
    pretrained = base.base_only() if config.beta_kl > 0 else None
    rewards = build_rewards(config)
    with MetricsWriter(out) as writer:
        records = finetune(params, config, schedule, rewards, writer, pretrained, out if config.save_every else None)
    ckpt = out / "adapters.ckpt"
    save_adapters(str(ckpt), params, {"mode": config.mode.value, "steps": config.steps})
    write_manifest(out, "finetune", config, {"base": config.base_checkpoint, "adapters": str(ckpt)},
                   [str(ckpt)], str(writer.path))
    if len(records) >= 2:
        first, last, z = reward_trend(records)
        print(json.dumps({"first_window_reward": first, "last_window_reward": last, "z": z}))
    return EXIT_OK


def cmd_sample(args: argparse.Namespace) -> int:
    config = _config(SampleConfig, args)
    out = _out_dir(args)
    params, schedule = load_model(config.checkpoint, config.sampler_steps, config.adapters, config.lora_scale)
    samples = generate_samples(params, config.classes, config.n_per_class, schedule, config.guidance_w,
                               config.seed, config.sampler)
    outputs = export_samples(samples, out, config.png)
    write_manifest(out, "sample", config, {"denoiser": config.checkpoint, **_adapter_paths(config.adapters)},
                   outputs)
    print(json.dumps({"images": len(samples)}))
    return EXIT_OK


def _adapter_paths(*paths: Optional[str]) -> Dict[str, str]:
    names = ("adapters", "adapters_b")
    return {name: p for name, p in zip(names, paths) if p}


def cmd_eval(args: argparse.Namespace) -> int:
    config = _config(EvalConfig, args)
    out = _out_dir(args)
    params, schedule = load_model(config.checkpoint, config.sampler_steps, config.adapters, config.lora_scale)
    summary = eval_model(params, build_rewards(config), config.n_samples, schedule, config.classes,
                         config.guidance_w, config.seed)
    path = out / "eval.json"
    path.write_text(summary.model_dump_json(indent=2) + "\n", encoding="utf-8")
    write_manifest(out, "eval", config, {"denoiser": config.checkpoint, **_adapter_paths(config.adapters)},
                   [str(path)])
    print(summary.combined.model_dump_json())
    return EXIT_OK


def cmd_lora_scale(args: argparse.Namespace) -> int:
    config = _config(EvalConfig, args, alphas=args.alphas)
    if not config.adapters:
        raise ValidationError("lora-scale에는 adapters가 필요합니다")
    out = _out_dir(args)
    params, schedule = load_model(config.checkpoint, config.sampler_steps, config.adapters)
    rows = lora_scale_table(params, config.alphas, build_rewards(config), config.n_samples, schedule,
                            config.classes, config.guidance_w, config.seed)
    path = write_jsonl(out / "lora_scale.jsonl", rows)
    write_manifest(out, "lora-scale", config, {"denoiser": config.checkpoint, **_adapter_paths(config.adapters)},
                   [str(path)])
    _print_table(rows)
    return EXIT_OK


def cmd_lora_mix(args: argparse.Namespace) -> int:
    config = _config(EvalConfig, args)
    if not config.adapters or not config.adapters_b:
        raise ValidationError("lora-mix에는 adapters와 adapters_b가 필요합니다")
    out = _out_dir(args)
    base, meta = load_denoiser(config.checkpoint)
    schedule = schedule_from_meta(meta["schedule"], config.sampler_steps)
    deltas_a = load_adapters(config.adapters, base).merged_form().merged
    deltas_b = load_adapters(config.adapters_b, base).merged_form().merged
    rows = lora_mix_table(base.base_only(), deltas_a, deltas_b, config.mix_pairs, build_rewards(config),
                          config.n_samples, schedule, config.classes, config.guidance_w, config.seed)
    path = write_jsonl(out / "lora_mix.jsonl", rows)
    write_manifest(out, "lora-mix", config,
                   {"denoiser": config.checkpoint, **_adapter_paths(config.adapters, config.adapters_b)},
                   [str(path)])
    _print_table(rows)
    return EXIT_OK


def cmd_lora_window(args: argparse.Namespace) -> int:
    config = _config(WindowConfig, args)
    out = _out_dir(args)
    base, meta = load_denoiser(config.checkpoint)
    schedule = schedule_from_meta(meta["schedule"], config.sampler_steps)
    params = load_adapters(config.adapters, base)
    rows, images = lora_window_table(params, config.window, config.windows, build_rewards(config),
                                     config.n_per_class, schedule, config.classes, config.guidance_w, config.seed)
    outputs = [str(write_jsonl(out / "lora_window.jsonl", rows))]
    for M, samples in images.items():
        outputs += export_samples(samples, out, prefix=f"{config.window}_M{M:03d}")
    write_manifest(out, "lora-window", config, {"denoiser": config.checkpoint, "adapters": config.adapters}, outputs)
    _print_table(rows)
    return EXIT_OK


def _diag_params(config: DiagConfig) -> Tuple[DenoiserParams, DenoiserParams, NoiseSchedule]:
    base, meta = load_denoiser(config.base_checkpoint)
    schedule = schedule_from_meta(meta["schedule"], config.sampler_steps)
    if config.adapters:
        params = load_adapters(config.adapters, base)
    else:
        params = attach_adapters(base, config.lora_rank, config.seed)
    return base, params, schedule


def cmd_diag_k(args: argparse.Namespace) -> int:
    config = _config(DiagConfig, args)
    out = _out_dir(args)
    _, params, schedule = _diag_params(config)
    rewards = build_rewards(config)
    rows = k_trend(params, config, schedule, rewards)
    outputs = [str(write_jsonl(out / "k_diag.jsonl", rows))]
    if config.plot:
        outputs.append(str(plot_k_trend(rows, out / "k_diag.png")))
    if config.variance_resamples:
        contexts = draw_contexts(config.classes, config.batch, KeyedRng(config.seed), 0, tag="variance-prompts")
        report = variance_report(params, finetune_config_from(config), contexts, schedule, rewards,
                                 config.variance_resamples)
        outputs.append(str(write_jsonl(out / "variance.jsonl", [report])))
    write_manifest(out, "diag-k", config, {"base": config.base_checkpoint}, outputs)
    _print_table([r.model_dump() for r in rows])
    return EXIT_OK


def cmd_clip_ablation(args: argparse.Namespace) -> int:
    config = _config(DiagConfig, args)
    out = _out_dir(args)
    base, _, schedule = _diag_params(config)
    rows = clip_ablation(base, config, schedule, build_rewards(config))
    path = write_jsonl(out / "clip_ablation.jsonl", rows)
    write_manifest(out, "clip-ablation", config, {"base": config.base_checkpoint}, [str(path)])
    _print_table([r.model_dump() for r in rows])
    return EXIT_OK


def cmd_doodl(args: argparse.Namespace) -> int:
    config = _config(DoodlConfig, args)
    out = _out_dir(args)
    params, schedule = load_model(config.checkpoint, config.sampler_steps, config.adapters)
    rewards = build_rewards(config)
    digest_before = tensors_digest({k: v.data for k, v in params.base.items()})
    rng = KeyedRng(config.seed)
    shape = (3, params.spec.image_size, params.spec.image_size)
    rows: List[Dict[str, object]] = []
    outputs: List[str] = []
    for s in range(config.n_seeds):
        x_T = rng.normal("doodl-x_T", shape, config.class_id, s)
        _, trace, curve = doodl_optimize(params, Context(config.class_id), x_T, schedule, rewards,
                                         config.steps, config.lr, config.guidance_w)
        rows += [{"seed_index": s, "iteration": i, "reward": r} for i, r in enumerate(curve)]
        image = to_unit_range(trace.x0).data.astype(np.float64)
        outputs.append(str(write_ppm(out / f"doodl_c{config.class_id}_{s:03d}.ppm", image)))
    if tensors_digest({k: v.data for k, v in params.base.items()}) != digest_before:
        raise NumericalError("doodl 중 denoiser 파라미터가 바뀌었습니다")
    outputs.insert(0, str(write_jsonl(out / "doodl_curve.jsonl", rows)))
    write_manifest(out, "doodl", config, {"denoiser": config.checkpoint, **_adapter_paths(config.adapters)}, outputs)
    finals = [r for r in rows if r["iteration"] == config.steps]
    _print_table(finals)
    return EXIT_OK


def cmd_grad_check(args: argparse.Namespace) -> int:
    config = _config(GradCheckConfig, args)
    out = _out_dir(args)
    results = grad_check(config)
    path = write_jsonl(out / "grad_check.jsonl", [{"run": k, "max_rel_err": v} for k, v in results.items()])
    write_manifest(out, "grad-check", config, outputs=[str(path)])
    for label, err in results.items():
        print(f"{label}\t{err:.3e}")
    worst = max(results.values()) if results else 0.0
    if worst > config.tolerance:
        logger.error(f"❌ [GRAD_CHECK] 허용 오차 초과: {worst:.3e} > {config.tolerance:g}")
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    uvicorn.run("app.main:app", host=args.host or settings.HOST, port=args.port or settings.PORT)
    return EXIT_OK


COMMANDS: Dict[str, Handler] = {
    "gen-dataset": cmd_gen_dataset,
    "pretrain": cmd_pretrain,
    "train-scorer": _cmd_toy("scorer"),
    "train-classifier": _cmd_toy("classifier"),
    "finetune": cmd_finetune,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "diag-k": cmd_diag_k,
    "doodl": cmd_doodl,
    "grad-check": cmd_grad_check,
    "lora-scale": cmd_lora_scale,
    "lora-mix": cmd_lora_mix,
    "lora-window": cmd_lora_window,
    "clip-ablation": cmd_clip_ablation,
    "serve": cmd_serve,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="draft-lab", description="미분 가능한 보상으로 확산 모델 미세조정")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key = value 설정 파일")
        p.add_argument("--seed", type=int, default=None, help="run seed (설정 파일보다 우선)")
        p.add_argument("--out", default=None, help="출력 디렉터리")
        if name == "lora-scale":
            p.add_argument("--alphas", default=None, help="쉼표로 구분한 α 목록")
        if name == "serve":
            p.add_argument("--host", default=None)
            p.add_argument("--port", type=int, default=None)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    set_level(settings.LOG_LEVEL)
    try:
        set_precision(settings.PRECISION)
        set_debug_replay(settings.DEBUG_CHECKPOINT)
        logger.info(f"🚀 [CLI] {args.command} (precision={settings.PRECISION})")
        return COMMANDS[args.command](args)
    except pydantic.ValidationError as e:
        logger.error(f"❌ [CLI] 설정 검증 실패: {e}")
        return EXIT_VALIDATION
    except ValidationError as e:
        logger.error(f"❌ [CLI] 검증 오류: {e}")
        return EXIT_VALIDATION
    except NumericalError as e:
        logger.error(f"❌ [CLI] 수치 실패: {e}")
        return EXIT_NUMERICAL
    except LabError as e:
        logger.error(f"❌ [CLI] 실행 실패: {e}")
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
