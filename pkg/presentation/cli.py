"""CLI - Các subcommand cho toàn bộ pipeline medical VQA.

    synth        sinh dataset tổng hợp
    reformulate  chuyển multiple-choice thành open-ended
    split        chia train/test theo ảnh
    train        huấn luyện theo stage (vision → text → joint)
    eval         đánh giá exact-match (hoặc chấm bảng đếm có sẵn)
    generate     sinh câu trả lời cho một ảnh
    gradcheck    kiểm tra gradient toàn bộ thành phần
    stats        thống kê dataset và mức lặp lại train/test
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from engine.errors import MedVQAError, SchemaError, StorageError
from application.checkpoint import load_checkpoint
from application.config import RunConfig
from application.dataset import (ImageCache, dataset_summary, load_dataset, load_image,
                                 reformulate_all, save_dataset, split)
from application.diagnostics import run_gradcheck_suite
from application.evaluator import evaluate, repetition_audit, score_counts, score_verdicts
from application.synthetic import SyntheticSpec, write_synthetic
from application.trainer import (ConsoleObserver, StageData, Trainer, emit_loss_csv)
from application.vlm_model import GenerationParams, VLMModel, generate_text
from presentation.logging_config import configure_logging
from presentation.reports import (BANNER, REPORT_FILE, emit_report, print_dataset_stats,
                                  print_gradcheck_table, print_model_summary, print_summary)

logger = logging.getLogger(__name__)

EXIT_OK = 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="medvqa", description="Desk-scale medical VQA pipeline")
    parser.add_argument("-v", "--verbose", action="store_true", help="log mức DEBUG")
    parser.add_argument("-q", "--quiet", action="store_true", help="chỉ log cảnh báo, tắt progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="sinh dataset tổng hợp")
    p.add_argument("--spec", type=Path, help="file JSON SyntheticSpec (mặc định: spec mặc định)")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("reformulate", help="multiple-choice → open-ended")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_reformulate)

    p = sub.add_parser("split", help="chia train/test theo ảnh")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--ratio", type=float, default=0.70)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_split)

    p = sub.add_parser("train", help="huấn luyện theo stage")
    p.add_argument("--config", type=Path)
    p.add_argument("--stage", choices=["vision", "text", "joint", "all"], default="all")
    p.add_argument("--resume", type=Path, help="thư mục checkpoint để tiếp tục")
    p.add_argument("--out", type=Path, help="ghi đè output_dir trong config")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override cấu hình, lặp lại được")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="đánh giá exact-match")
    p.add_argument("--ckpt", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--counts", type=Path, help="bảng đếm hoặc file verdict có sẵn")
    p.add_argument("--out", type=Path, default=Path(REPORT_FILE))
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--workers", type=int)
    p.add_argument("--config", type=Path)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("generate", help="sinh câu trả lời cho một ảnh")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--question", required=True)
    p.add_argument("--max-new-tokens", type=int, default=16)
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("gradcheck", help="kiểm tra gradient")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("stats", help="thống kê dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--train", type=Path, help="split train để đo mức lặp lại")
    p.set_defaults(handler=cmd_stats)
    return parser


# --------------------------------------------------------------------------- #
# Handlers
# --------------------------------------------------------------------------- #
def cmd_synth(args) -> int:
    spec = SyntheticSpec.from_json(args.spec) if args.spec else SyntheticSpec()
    records = write_synthetic(spec, args.out)
    print(f"✅ Đã ghi {len(records)} record vào {args.out / 'dataset.json'}")
    return EXIT_OK


def cmd_reformulate(args) -> int:
    records, converted, passed = reformulate_all(load_dataset(args.input))
    save_dataset(records, args.out)
    print(f"✅ Reformulate: {converted} chuyển đổi, {passed} giữ nguyên")
    return EXIT_OK


def cmd_split(args) -> int:
    result = split(load_dataset(args.input), args.ratio, args.seed)
    save_dataset(result.train, args.out / "train.json")
    save_dataset(result.test, args.out / "test.json")
    print(f"✅ Split seed={args.seed}: {len(result.train)} train / {len(result.test)} test")
    return EXIT_OK


def _load_split(path_value) -> list:
    if path_value is None:
        return []
    path = Path(path_value)
    return load_dataset(path) if path.exists() else []


def cmd_train(args) -> int:
    config = RunConfig.load(args.config, args.overrides)
    if args.out is not None:
        config.set(f"output_dir={json.dumps(str(args.out))}")
    out_dir = config.output_dir
    config.write_resolved(out_dir)

    train_path = Path(config.get("data.train"))
    train_records = load_dataset(train_path)
    test_records = _load_split(config.get("data.test"))
    image_root = config.get("data.image_root") or train_path.parent
    data = StageData(train_records, test_records, ImageCache(image_root))

    if args.resume is not None:
        model, checkpoint = load_checkpoint(args.resume)
    else:
        model = VLMModel(config.vision_config(), config.lm_config(), seed=config.seed)
        checkpoint = None

    progress = bool(config.get("train.progress")) and not args.quiet
    trainer = Trainer(model, config.hyperparams(), config.adamw_config(), config.lora_config(),
                      out_dir=out_dir, checkpoint_every=config.get("train.checkpoint_every"),
                      progress=progress)
    trainer.register_observer(ConsoleObserver(int(config.get("train.log_every"))))
    log = trainer.run(config.stage_plans(args.stage), data, resume=checkpoint)
    emit_loss_csv(log, out_dir / "loss.csv")

    print_model_summary(model.summary())
    print(BANNER)
    print(f"  Step: {len(log.steps)}  Epoch: {len(log.epochs)}")
    if log.epochs:
        last = log.epochs[-1]
        test = "n/a" if last.test_loss is None else f"{last.test_loss:.4f}"
        print(f"  Loss cuối: train={last.train_loss:.4f} test={test}")
    if trainer.last_checkpoint is not None:
        print(f"  Checkpoint: {trainer.last_checkpoint}")
    print(BANNER + "\n")
    return EXIT_OK


def _score_counts_file(path: Path):
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise StorageError(f"Không đọc được {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path} không phải JSON hợp lệ: {exc.msg}") from exc
    if isinstance(payload, list):
        return score_verdicts(payload)
    if isinstance(payload, dict) and "verdicts" in payload:
        return score_verdicts(payload["verdicts"])
    if not isinstance(payload, dict):
        raise SchemaError(f"{path}: cần object bảng đếm hoặc danh sách verdict")
    return score_counts(payload)


def cmd_eval(args) -> int:
    config = RunConfig.load(args.config, args.overrides)
    if args.counts is not None:
        report = _score_counts_file(args.counts)
    else:
        if args.ckpt is None or args.data is None:
            raise SchemaError("eval cần --ckpt và --data (hoặc --counts)")
        model, _ = load_checkpoint(args.ckpt)
        records = load_dataset(args.data)
        workers = args.workers if args.workers is not None else int(config.get("eval.workers"))
        image_root = config.get("data.image_root") or args.data.parent
        report = evaluate(model, records, ImageCache(image_root), config.rules(),
                          config.generation_params(), workers=workers)
    emit_report(report, args.out, args.format)
    print_summary(report)
    return EXIT_OK


def cmd_generate(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    image = load_image(args.image)
    answer = generate_text(model, image, args.question, GenerationParams(args.max_new_tokens))
    print(answer)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradcheck_suite(args.seed)
    print_gradcheck_table(results)
    failed = [r.component for r in results if not r.passed]
    if failed:
        logger.error("❌ Gradcheck thất bại: %s", ", ".join(failed))
        return 1
    return EXIT_OK


def cmd_stats(args) -> int:
    records = load_dataset(args.data)
    audit = repetition_audit(load_dataset(args.train), records) if args.train else None
    print_dataset_stats(dataset_summary(records), audit)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point; trả về exit code (0 thành công, 1 lỗi contract, 2 lỗi I/O)."""
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(1 if args.verbose else (-1 if args.quiet else 0))
    try:
        return args.handler(args)
    except MedVQAError as exc:
        logger.error("❌ %s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except OSError as exc:
        logger.error("❌ Lỗi I/O: %s", exc)
        return StorageError.exit_code


if __name__ == "__main__":
    sys.exit(main())
