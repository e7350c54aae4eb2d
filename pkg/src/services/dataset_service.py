import itertools
import logging
import math
import re
from pathlib import Path
from typing import Iterator, List, Sequence, Tuple, Union

import numpy as np

from src.models.experiment_config import ExperimentConfig, Task
from src.models.task_data import (
    DyckConfig,
    DyckDataset,
    ScanConfig,
    ScanDataset,
    TaskBatch,
    Vocab,
    dyck_depths,
)
from src.utils.error_handler import ConfigValidationError, DatasetFormatError, DatasetNotFoundError
from src.utils.helpers import rng_stream

logger = logging.getLogger(__name__)

TaskDataset = Union[DyckDataset, ScanDataset]
ScanPair = Tuple[Tuple[str, ...], Tuple[str, ...]]

_SCAN_LINE = re.compile(r"^IN:(?P<command>.*?)\s*OUT:(?P<actions>.*)$")

_PRIMITIVES = {"walk": "I_WALK", "look": "I_LOOK", "run": "I_RUN", "jump": "I_JUMP"}
_TURNS = {"left": "I_TURN_LEFT", "right": "I_TURN_RIGHT"}


# --- Dyck-1 -----------------------------------------------------------------

def _sample_dyck(half: int, rng: np.random.Generator) -> str:
    """
    長さ 2·half の平衡括弧列を一様に1本サンプリング

    half+1 個の上昇と half 個の下降を並べ替え、最後の最小プレフィックス位置から
    巡回シフトすると全プレフィックスが正になる（巡回補題）。先頭の上昇を除けば
    Dyck 経路になり、各経路は同じ数の並びから得られるので分布は一様。
    """
    steps = np.array([1] * (half + 1) + [-1] * half)
    rng.shuffle(steps)
    prefix = np.concatenate([[0], np.cumsum(steps)])[:-1]
    last_min = len(prefix) - 1 - int(np.argmin(prefix[::-1]))
    rotated = np.roll(steps, -last_min)[1:]
    return "".join("(" if s > 0 else ")" for s in rotated)


def catalan(n: int) -> int:
    return math.comb(2 * n, n) // (n + 1)


def generate_dyck(config: DyckConfig) -> Tuple[DyckDataset, DyckDataset]:
    """
    Dyck-1 の学習・テスト集合を生成（系列単位で重複なし）

    Args:
        config: 生成設定

    Returns:
        Tuple[DyckDataset, DyckDataset]: (学習, テスト)

    Raises:
        ConfigValidationError: 奇数長や要求数が可能な系列数を超える場合
    """
    config.validate()
    half = config.seq_len // 2
    needed = config.n_train + config.n_test
    if config.max_depth == half and needed > catalan(half):
        raise ConfigValidationError(
            f"長さ {config.seq_len} の平衡系列は {catalan(half)} 通りしかありません (要求 {needed})"
        )

    rng = np.random.default_rng(config.seed)
    seen = set()
    ordered: List[str] = []
    attempts = 0
    max_attempts = needed * 1000
    while len(ordered) < needed:
        attempts += 1
        if attempts > max_attempts:
            raise ConfigValidationError("重複のない系列を必要数生成できませんでした")
        seq = _sample_dyck(half, rng)
        if seq in seen or max(dyck_depths(seq)) > config.max_depth:
            continue
        seen.add(seq)
        ordered.append(seq)

    def make(seqs: List[str]) -> DyckDataset:
        return DyckDataset(sequences=seqs, labels=[dyck_depths(s) for s in seqs],
                           n_classes=config.n_classes)

    logger.info(f"Dyck データを生成しました: train={config.n_train}, test={config.n_test}")
    return make(ordered[:config.n_train]), make(ordered[config.n_train:])


def export_dyck_text(dataset: DyckDataset, path: str) -> Path:
    """
    Dyck 集合をテキストで書き出す（1行1系列、括弧列とカンマ区切りの深さ）

    Args:
        dataset: データセット
        path: 出力先

    Returns:
        Path: 出力先
    """
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        for seq, labels in zip(dataset.sequences, dataset.labels):
            f.write(f"{seq} {','.join(str(d) for d in labels)}\n")
    return out


# --- SCAN -------------------------------------------------------------------

def _interpret_direction(prefix: str, direction: str) -> List[str]:
    """"<U|turn> left/right" の解釈"""
    turn = _TURNS[direction]
    return [turn] if prefix == "turn" else [turn, _PRIMITIVES[prefix]]


def _interpret_verb_phrase(words: Sequence[str]) -> List[str]:
    if len(words) == 1:
        return [] if words[0] == "turn" else [_PRIMITIVES[words[0]]]
    if len(words) == 2:
        return _interpret_direction(words[0], words[1])
    verb, modifier, direction = words
    turn = _TURNS[direction]
    act = [] if verb == "turn" else [_PRIMITIVES[verb]]
    if modifier == "opposite":
        return [turn, turn] + act
    return ([turn] + act) * 4


def interpret_scan(command: Sequence[str]) -> List[str]:
    """
    SCAN 文法の解釈関数

    Args:
        command: コマンド単語列

    Returns:
        List[str]: 行動列
    """
    words = list(command)
    for joiner in ("and", "after"):
        if joiner in words:
            i = words.index(joiner)
            left, right = interpret_scan(words[:i]), interpret_scan(words[i + 1:])
            return left + right if joiner == "and" else right + left
    repeat = 1
    if words and words[-1] in ("twice", "thrice"):
        repeat = 2 if words[-1] == "twice" else 3
        words = words[:-1]
    return _interpret_verb_phrase(words) * repeat


def generate_scan_corpus() -> List[ScanPair]:
    """SCAN 文法の全コマンドを列挙（20,910 通り）"""
    actors = list(_PRIMITIVES) + ["turn"]
    verbs: List[Tuple[str, ...]] = [(u,) for u in _PRIMITIVES]
    for actor in actors:
        for direction in _TURNS:
            verbs.append((actor, direction))
            verbs.append((actor, "opposite", direction))
            verbs.append((actor, "around", direction))
    sentences = [v + suffix for v in verbs for suffix in ((), ("twice",), ("thrice",))]

    commands: List[Tuple[str, ...]] = list(sentences)
    for left, right in itertools.product(sentences, repeat=2):
        commands.append(left + ("and",) + right)
        commands.append(left + ("after",) + right)
    return [(c, tuple(interpret_scan(c))) for c in commands]


def write_scan_file(path: str, pairs: Sequence[ScanPair]) -> Path:
    """標準の SCAN 行形式 "IN: <command> OUT: <actions>" で書き出す"""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        for command, actions in pairs:
            f.write(f"IN: {' '.join(command)} OUT: {' '.join(actions)}\n")
    return out


def parse_scan_file(path: str) -> List[ScanPair]:
    """
    SCAN ファイルを解析

    Args:
        path: ファイルパス

    Returns:
        List[ScanPair]: (コマンド, 行動) の列（空コマンドも許容）

    Raises:
        DatasetNotFoundError: ファイルが存在しない
        DatasetFormatError: 不正な行（行番号付き）
    """
    source = Path(path)
    if not source.exists():
        raise DatasetNotFoundError(f"SCAN ファイルが見つかりません: {path}")
    pairs: List[ScanPair] = []
    with open(source, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            match = _SCAN_LINE.match(line.strip())
            if match is None:
                raise DatasetFormatError(str(path), line_no, line)
            pairs.append((tuple(match.group("command").split()),
                          tuple(match.group("actions").split())))
    return pairs


def load_scan(config: ScanConfig) -> Tuple[ScanDataset, ScanDataset]:
    """
    SCAN ファイルを読み込み、長さフィルタの後に学習集合を無作為抽出

    Args:
        config: 読み込み設定

    Returns:
        Tuple[ScanDataset, ScanDataset]: (学習, テスト＝残り全部)
    """
    config.validate()
    unique = {}
    for command, actions in parse_scan_file(config.path):
        unique.setdefault(command, actions)
    pairs = [
        (c, a) for c, a in unique.items()
        if (config.max_command_len is None or len(c) <= config.max_command_len)
        and (config.max_action_len is None or len(a) <= config.max_action_len)
    ]
    if config.n_train >= len(pairs):
        raise ConfigValidationError(
            f"n_train ({config.n_train}) が例の総数 ({len(pairs)}) 以上です"
        )

    source_vocab = Vocab.build([c for c, _ in pairs])
    target_vocab = Vocab.build([a for _, a in pairs])
    order = np.random.default_rng(config.data_seed).permutation(len(pairs))

    def make(indices) -> ScanDataset:
        return ScanDataset(commands=[pairs[i][0] for i in indices],
                           actions=[pairs[i][1] for i in indices],
                           source_vocab=source_vocab, target_vocab=target_vocab)

    train, test = make(order[:config.n_train]), make(order[config.n_train:])
    logger.info(
        f"SCAN を読み込みました: 全{len(pairs)}件 train={len(train)} test={len(test)} "
        f"語彙 コマンド={source_vocab.word_count}(+特殊{len(source_vocab) - source_vocab.word_count}) "
        f"行動={target_vocab.word_count}"
    )
    return train, test


# --- バッチ -------------------------------------------------------------------

def make_batches(dataset: TaskDataset, batch_size: int, seed: int) -> Iterator[TaskBatch]:
    """
    1エポック分のバッチ列（シードで順序が決まる）

    Args:
        dataset: データセット
        batch_size: バッチサイズ
        seed: シャッフルのシード

    Yields:
        TaskBatch: バッチ（最後は端数）
    """
    if batch_size < 1:
        raise ConfigValidationError(f"batch_size は1以上である必要があります: {batch_size}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        yield dataset.batch(order[start:start + batch_size])


def batch_for_step(dataset: TaskDataset, batch_size: int, seed: int, step: int) -> TaskBatch:
    """
    学習ステップに対応するバッチ

    エポックごとの並びは rng_stream(seed, "data:<epoch>") から決まるため、
    途中再開でも同じバッチ列になる。
    """
    per_epoch = math.ceil(len(dataset) / batch_size)
    epoch, position = divmod(step, per_epoch)
    order = rng_stream(seed, f"data:{epoch}").permutation(len(dataset))
    return dataset.batch(order[position * batch_size:(position + 1) * batch_size])


def prepare_task(config: ExperimentConfig) -> Tuple[TaskDataset, TaskDataset]:
    """
    実験設定に応じて学習・テスト集合を用意

    SCAN ファイルが無く scan_generate が有効なら文法から生成して書き出す。
    """
    if config.task == Task.DYCK:
        return generate_dyck(DyckConfig(seq_len=config.seq_len, max_depth=config.max_depth,
                                        n_train=config.resolved_n_train, n_test=config.n_test,
                                        seed=config.data_seed))

    if not Path(config.scan_path).exists() and config.scan_generate:
        logger.info(f"SCAN ファイルが無いため文法から生成します: {config.scan_path}")
        write_scan_file(config.scan_path, generate_scan_corpus())
    return load_scan(ScanConfig(path=config.scan_path, n_train=config.resolved_n_train,
                                data_seed=config.data_seed,
                                max_command_len=config.max_command_len,
                                max_action_len=config.max_action_len))
