"""
コマンドラインインタフェース

``pyequicpi <subcommand> ...`` で各段を実行する。設定は 既定値 → ``--config`` の JSON → フラグ の順に重ねて解決し、
全ての出力に設定ハッシュと乱数シードを埋め込む。終了コードは 成功 0、検証エラー 1、入出力エラー 2。
"""
import argparse
import dataclasses
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple
import pandas as pd
from pyequicpi.helper import (
    SysLog,
    LoggingLevel,
    EquiCPIError,
    ArgumentError,
    ValidationError,
    Settings,
    build_dataclass,
    canonical_json,
    to_plain,
    __version__,
)
from pyequicpi.chemio import ComplexRecord, LigandMolecule, load_manifest, parse_pdb, parse_sdf, write_sdf
from pyequicpi.fingerprint import morgan_fingerprint
from pyequicpi.geograph import CutoffConfig, build_graph
from pyequicpi.equinet import ModelConfig
from pyequicpi.difftrain import load_checkpoint, save_checkpoint
from pyequicpi.difftrain.trainer import FingerprintConfig, TrainConfig, build_examples, load_model, train
from pyequicpi.physscore import VinaWeights, receptor_typing, rerank_poses, select_pose, vina_terms
from pyequicpi.datasplit import SplitConfig, SplitSetting, make_split, split_items_from_records
from pyequicpi.metrics import ScreenEntry, ScreenResult, evaluate, parse_metric, simulate_random_screen

logger = SysLog.logger

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "DISABLE")


@dataclass(frozen=True)
class FusionConfig:
    """再ランキングの融合重み fused = lam·p − alpha·z(e_vina)"""

    lam: float = 1.0
    alpha: float = 1.0


@dataclass(frozen=True)
class RunConfig:
    """解決済みの実行設定（全ての段の設定をまとめたもの）"""

    cutoff: CutoffConfig = field(default_factory=CutoffConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    vina: VinaWeights = field(default_factory=VinaWeights)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    fingerprint: FingerprintConfig = field(default_factory=FingerprintConfig)
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.threads < 1:
            raise ValidationError(f"threads must be >= 1, got {self.threads}")


@dataclass(frozen=True)
class Provenance:
    config_hash: str
    seed: int
    config: Dict

    def csv_comment(self) -> str:
        return f"# pyequicpi config_hash={self.config_hash} seed={self.seed}\n"

    def to_dict(self) -> Dict:
        return {"config": self.config, "config_hash": self.config_hash, "seed": self.seed, "version": __version__}


@dataclass
class Context:
    cfg: RunConfig
    provenance: Provenance


class _Parser(argparse.ArgumentParser):
    """使用法の誤りを例外として送出する（終了コード 1 に対応付けるため）"""

    def error(self, message):
        raise ArgumentError(f"{self.prog}: {message}")


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
    common.add_argument("--seed", type=int, help="random seed (training, splitting, simulation)")
    common.add_argument("--threads", type=int, help="worker threads for per-record stages")
    common.add_argument("--log-level", choices=LOG_LEVELS, help="console log level (default WARNING)")
    common.add_argument("--log-file", help="also log to a rotating file")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = _Parser(prog="pyequicpi", description="Equivariant compound-protein interaction pipeline", parents=[common])
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("fingerprint", parents=[common], help="Morgan fingerprints of ligands")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--manifest")
    source.add_argument("--sdf")
    p.add_argument("--radius", type=int, default=None)
    p.add_argument("--nbits", type=int, default=None)
    p.add_argument("--out")

    p = sub.add_parser("build-graph", parents=[common], help="heterogeneous geometric graphs as JSON")
    p.add_argument("--manifest", required=True)
    p.add_argument("--method", choices=("brute", "kdtree"), default="brute")
    p.add_argument("--out")

    p = sub.add_parser("train", parents=[common], help="train the network and save a checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-log", help="CSV of per-step losses")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", dest="learning_rate", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default=None)

    p = sub.add_parser("predict", parents=[common], help="predict normalized p_EC50 per record")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--with-labels", action="store_true", help="append label and is_active columns")
    p.add_argument("--out")

    p = sub.add_parser("score-vina", parents=[common], help="Vina-style score of every pose")
    p.add_argument("--ligand", required=True, help="SDF with one or more poses")
    p.add_argument("--protein", required=True)
    p.add_argument("--out")

    p = sub.add_parser("rerank", parents=[common], help="rerank poses by fused score")
    p.add_argument("--poses", required=True)
    p.add_argument("--protein", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--top-sdf", help="write the best pose to this SDF")
    p.add_argument("--out")

    p = sub.add_parser("split", parents=[common], help="cross-cluster k-fold split with leakage report")
    p.add_argument("--manifest", required=True)
    p.add_argument("--setting", required=True, choices=[s.value for s in SplitSetting])
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--compound-threshold", type=float, default=None)
    p.add_argument("--protein-threshold", type=float, default=None)
    p.add_argument("--linkage", choices=("complete", "single", "average"), default=None)
    p.add_argument("--out")

    p = sub.add_parser("eval", parents=[common], help="regression and screening metrics")
    p.add_argument("--pred", required=True, help="CSV with an id column and a score column")
    p.add_argument("--metrics", default="ci,spearman,pearson,mse")
    p.add_argument("--group-by", help="column used to group entries (e.g. target)")
    p.add_argument("--score-column", help="defaults to 'prediction' or 'score'")
    p.add_argument("--label-column", default="label")
    p.add_argument("--active-column", default="is_active")
    p.add_argument("--negate-score", action="store_true", help="rank by −score (e.g. for energies)")
    p.add_argument("--out")

    p = sub.add_parser("simulate-screen", parents=[common], help="random-ranking Monte-Carlo baseline")
    p.add_argument("--actives", type=int, default=1759)
    p.add_argument("--decoys", type=int, default=107590)
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--per-target", help="CSV with actives,decoys columns (one row per target)")
    p.add_argument("--ef", default="1", help="comma separated EF percentages")
    p.add_argument("--bedroc-alpha", default="80.5", help="comma separated BEDROC alphas")
    p.add_argument("--out")
    return parser


_FLAG_TARGETS = {
    "steps": ("train", "steps"),
    "learning_rate": ("train", "learning_rate"),
    "batch_size": ("train", "batch_size"),
    "optimizer": ("train", "optimizer"),
    "lam": ("fusion", "lam"),
    "alpha": ("fusion", "alpha"),
    "folds": ("split", "folds"),
    "compound_threshold": ("split", "compound_threshold"),
    "protein_threshold": ("split", "protein_threshold"),
    "linkage": ("split", "linkage"),
    "radius": ("fingerprint", "radius"),
}


def flag_overrides(args: argparse.Namespace) -> Dict:
    """コマンドラインで指定された値だけを設定の上書き辞書にする"""
    overrides: Dict = {}
    for flag, (section, key) in _FLAG_TARGETS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides.setdefault(section, {})[key] = value
    if getattr(args, "nbits", None) is not None:
        overrides.setdefault("fingerprint", {})["nbits"] = args.nbits
        overrides.setdefault("model", {})["fingerprint_width"] = args.nbits
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
        overrides.setdefault("train", {})["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        overrides["threads"] = args.threads
    return overrides


def resolve_config(args: argparse.Namespace) -> Tuple[RunConfig, Settings]:
    settings = Settings(to_plain(RunConfig()), getattr(args, "config", None))
    overrides = flag_overrides(args)
    if overrides:
        settings.update(overrides)
    return build_dataclass(RunConfig, settings.data), settings


def configure_logging(args: argparse.Namespace):
    SysLog.reset()
    level = LoggingLevel.from_name(getattr(args, "log_level", "WARNING"))
    SysLog.console_log_configuration(level)
    if getattr(args, "log_file", None):
        SysLog.rotation_log_configuration(level, args.log_file)
    SysLog.set_loglevel(level)


@contextmanager
def worker_map(threads: int) -> Iterator[Callable]:
    """``threads`` > 1 なら ThreadPoolExecutor.map（結果は入力順）、それ以外は組込みの map"""
    if threads <= 1:
        yield map
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        yield pool.map


def _read_bytes(path: str) -> bytes:
    with open(path, "rb") as fp:
        return fp.read()


def _write_text(path: Optional[str], text: str):
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    with open(path, "w", encoding="utf-8", newline="") as fp:
        fp.write(text)
    logger.info(f"wrote {path}")


def _csv_text(frame: pd.DataFrame, provenance: Provenance) -> str:
    return provenance.csv_comment() + frame.to_csv(index=False, lineterminator="\n")


def _json_text(data: Dict, provenance: Provenance) -> str:
    return canonical_json({**data, "provenance": provenance.to_dict()}, indent=2) + "\n"


def _selected_records(records: Sequence[ComplexRecord], ctx: Context, map_fn: Callable) -> List[ComplexRecord]:
    """複数ポーズの記録は再ランキング最上位のポーズに差し替える"""
    cfg = ctx.cfg

    def choose(record: ComplexRecord) -> ComplexRecord:
        ligand = select_pose(record, cfg.vina, cfg.fusion.lam, cfg.fusion.alpha)
        return record if ligand is record.ligand else dataclasses.replace(record, ligand=ligand)

    return list(map_fn(choose, records))


def cmd_fingerprint(args, ctx: Context) -> int:
    cfg = ctx.cfg.fingerprint
    if args.sdf:
        molecules: List[Tuple[str, LigandMolecule]] = [
            (mol.id or f"mol{i}", mol) for i, mol in enumerate(parse_sdf(_read_bytes(args.sdf)))
        ]
    else:
        molecules = [(r.complex_id, r.ligand) for r in load_manifest(args.manifest)]
    rows = []
    for name, mol in molecules:
        fp = morgan_fingerprint(mol, cfg.radius, cfg.nbits)
        rows.append({"id": name, "radius": fp.radius, "nbits": fp.nbits, "popcount": fp.popcount, "hex": fp.to_hex()})
    frame = pd.DataFrame(rows, columns=["id", "radius", "nbits", "popcount", "hex"])
    _write_text(args.out, _csv_text(frame, ctx.provenance))
    return EXIT_OK


def cmd_build_graph(args, ctx: Context) -> int:
    records = load_manifest(args.manifest)
    with worker_map(ctx.cfg.threads) as map_fn:
        records = _selected_records(records, ctx, map_fn)
        graphs = list(map_fn(lambda r: build_graph(r, ctx.cfg.cutoff, method=args.method), records))
    _write_text(args.out, _json_text({"graphs": [g.to_dict() for g in graphs]}, ctx.provenance))
    return EXIT_OK


def cmd_train(args, ctx: Context) -> int:
    cfg = ctx.cfg
    records = load_manifest(args.manifest)
    with worker_map(cfg.threads) as map_fn:
        records = _selected_records(records, ctx, map_fn)
    result = train(records, cfg.train, cfg.model, cfg.cutoff, cfg.fingerprint)
    result.checkpoint.config["provenance"] = ctx.provenance.to_dict()
    loss_text = None
    if args.loss_log:
        frame = pd.DataFrame({"step": range(len(result.losses)), "loss": result.losses})
        loss_text = _csv_text(frame, ctx.provenance)
    save_checkpoint(result.checkpoint, args.out)
    if loss_text is not None:
        _write_text(args.loss_log, loss_text)
    print(f"final loss {result.losses[-1]:.6g} after {len(result.losses)} steps")
    return EXIT_OK


def cmd_predict(args, ctx: Context) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    model, fp_cfg = load_model(checkpoint)
    records = load_manifest(args.manifest)
    with worker_map(ctx.cfg.threads) as map_fn:
        records = _selected_records(records, ctx, map_fn)
        examples = [e for batch in map_fn(lambda r: build_examples([r], model.cutoff, fp_cfg), records) for e in batch]
        predictions = list(map_fn(lambda e: model.forward(e.graph, e.fingerprint, checkpoint.params), examples))
    frame = pd.DataFrame({"complex_id": [e.complex_id for e in examples], "prediction": predictions})
    if args.with_labels:
        frame["label"] = [e.label for e in examples]
        frame["is_active"] = [r.is_active for r in records]
    _write_text(args.out, _csv_text(frame, ctx.provenance))
    return EXIT_OK


def cmd_score_vina(args, ctx: Context) -> int:
    poses = parse_sdf(_read_bytes(args.ligand))
    if len(poses) == 0:
        raise ValidationError(f"{args.ligand}: no poses")
    protein = parse_pdb(_read_bytes(args.protein), os.path.splitext(os.path.basename(args.protein))[0])
    receptor = receptor_typing(protein)
    with worker_map(ctx.cfg.threads) as map_fn:
        terms = list(map_fn(lambda pose: vina_terms(pose, receptor, ctx.cfg.vina), poses))
    rows = []
    for i, (pose, t) in enumerate(zip(poses, terms)):
        row = {"pose_index": i, "pose_id": pose.id, "e_vina": t.score}
        row.update({k: v for k, v in t.to_dict().items() if k != "score"})
        rows.append(row)
    _write_text(args.out, _csv_text(pd.DataFrame(rows), ctx.provenance))
    return EXIT_OK


def cmd_rerank(args, ctx: Context) -> int:
    cfg = ctx.cfg
    poses = parse_sdf(_read_bytes(args.poses))
    if len(poses) == 0:
        raise ValidationError(f"{args.poses}: no poses")
    protein = parse_pdb(_read_bytes(args.protein), os.path.splitext(os.path.basename(args.protein))[0])
    with worker_map(cfg.threads) as map_fn:
        ranked = rerank_poses(poses, protein, cfg.vina, cfg.fusion.lam, cfg.fusion.alpha, map_fn=map_fn)
    frame = pd.DataFrame(
        [
            {
                "pose_index": p.pose_index,
                "e_vina": p.e_vina,
                "confidence": p.upstream_confidence,
                "fused": p.fused,
                "rank": p.rank,
            }
            for p in ranked
        ],
        columns=["pose_index", "e_vina", "confidence", "fused", "rank"],
    )
    text = _csv_text(frame, ctx.provenance)
    top = write_sdf([poses[ranked[0].pose_index]]) if args.top_sdf else None
    _write_text(args.out, text)
    if top is not None:
        _write_text(args.top_sdf, top)
    return EXIT_OK


def cmd_split(args, ctx: Context) -> int:
    cfg = ctx.cfg
    records = load_manifest(args.manifest)
    items = split_items_from_records(records, cfg.split, cfg.fingerprint.radius, cfg.fingerprint.nbits)
    assignment, report = make_split(items, args.setting, cfg.split, cfg.seed)
    data = {"assignment": assignment.to_dict(), "leakage": report.to_dict()}
    _write_text(args.out, _json_text(data, ctx.provenance))
    return EXIT_OK


def _parse_bool(value) -> Optional[bool]:
    if value is None or (isinstance(value, float) and pd.isna(value)):
        return None
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "active"):
        return True
    if text in ("0", "false", "no", "inactive", "decoy"):
        return False
    if text == "":
        return None
    raise ValidationError(f"not a boolean activity label: {value!r}")


def _column(frame: pd.DataFrame, name: Optional[str], fallbacks: Sequence[str], what: str) -> Optional[str]:
    if name is not None:
        if name not in frame.columns:
            raise ValidationError(f"{what} column {name!r} not found")
        return name
    return next((c for c in fallbacks if c in frame.columns), None)


def load_screen_result(
    path: str,
    score_column: Optional[str] = None,
    label_column: str = "label",
    active_column: str = "is_active",
    group_by: Optional[str] = None,
    negate: bool = False,
) -> ScreenResult:
    """予測 CSV（``#`` 行はコメント）から ScreenResult を作る"""
    frame = pd.read_csv(path, comment="#", encoding="utf-8")
    id_col = _column(frame, None, ("complex_id", "id"), "id")
    score_col = _column(frame, score_column, ("prediction", "score"), "score")
    if id_col is None or score_col is None:
        raise ValidationError(f"{path}: needs an id column (complex_id/id) and a score column (prediction/score)")
    if group_by is not None:
        _column(frame, group_by, (), "group")
    sign = -1.0 if negate else 1.0
    entries = []
    for row in frame.to_dict(orient="records"):
        label = row.get(label_column)
        entries.append(
            ScreenEntry(
                id=str(row[id_col]),
                score=sign * float(row[score_col]),
                label=None if label is None or pd.isna(label) else float(label),
                active=_parse_bool(row.get(active_column)),
                group=None if group_by is None else str(row[group_by]),
            )
        )
    return ScreenResult(entries)


def cmd_eval(args, ctx: Context) -> int:
    metrics = [m for m in args.metrics.split(",") if m.strip()]
    for name in metrics:
        parse_metric(name)
    result = load_screen_result(
        args.pred, args.score_column, args.label_column, args.active_column, args.group_by, args.negate_score
    )
    report = evaluate(result, metrics, group_by=args.group_by is not None)
    data = {"metrics_requested": metrics, "report": report.to_dict()}
    _write_text(args.out, _json_text(data, ctx.provenance))
    return EXIT_OK


def _float_list(text: str, what: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ValidationError(f"{what}: not a comma separated list of numbers: {text!r}") from None


def cmd_simulate_screen(args, ctx: Context) -> int:
    compositions = None
    if args.per_target:
        table = pd.read_csv(args.per_target, comment="#")
        if not {"actives", "decoys"} <= set(table.columns):
            raise ValidationError(f"{args.per_target}: needs actives and decoys columns")
        compositions = [(int(a), int(d)) for a, d in zip(table["actives"], table["decoys"])]
    ef = _float_list(args.ef, "--ef")
    alphas = _float_list(args.bedroc_alpha, "--bedroc-alpha")
    with worker_map(ctx.cfg.threads) as map_fn:
        report = simulate_random_screen(
            args.actives,
            args.decoys,
            args.trials,
            ctx.cfg.seed,
            ef_percents=ef,
            bedroc_alphas=alphas,
            compositions=compositions,
            map_fn=map_fn,
        )
    data = {"mode": "pooled" if compositions is None else "per_target", "baseline": report.to_dict()}
    _write_text(args.out, _json_text(data, ctx.provenance))
    return EXIT_OK


COMMANDS: Dict[str, Callable] = {
    "fingerprint": cmd_fingerprint,
    "build-graph": cmd_build_graph,
    "train": cmd_train,
    "predict": cmd_predict,
    "score-vina": cmd_score_vina,
    "rerank": cmd_rerank,
    "split": cmd_split,
    "eval": cmd_eval,
    "simulate-screen": cmd_simulate_screen,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """サブコマンドを実行して終了コードを返す"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    except ArgumentError as e:
        sys.stderr.write(f"{e}\n")
        return EXIT_VALIDATION
    configure_logging(args)
    try:
        cfg, settings = resolve_config(args)
        if getattr(args, "print_config", False):
            sys.stdout.write(settings.dumps() + "\n")
            return EXIT_OK
        if args.command is None:
            parser.error("a subcommand is required")
        ctx = Context(cfg, Provenance(settings.config_hash(), cfg.seed, settings.data))
        logger.info(f"{args.command}: config_hash={ctx.provenance.config_hash} seed={cfg.seed}")
        return COMMANDS[args.command](args, ctx)
    except EquiCPIError as e:
        logger.error(str(e))
        sys.stderr.write(f"error: {e}\n")
        return EXIT_VALIDATION
    except OSError as e:
        logger.error(str(e))
        sys.stderr.write(f"error: {e}\n")
        return EXIT_IO


def main(argv: Optional[Sequence[str]] = None):
    """コンソールスクリプトの入口"""
    sys.exit(run(argv))
