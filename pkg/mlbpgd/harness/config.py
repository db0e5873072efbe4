"""実験設定（ExperimentConfig）: 既定値、key = value 形式の設定ファイル、シナリオ、プリセット"""
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..errors import ConfigError

logger = logging.getLogger(__name__)

EXPERIMENTS = ("deconv", "tomo", "ddesign", "selftest")

# ぼかし (PSF dim, σ) × ノイズ λ の4通り
SCENARIOS = {
    "low_blur_low_noise": {"psf_dim": 15, "psf_sigma": 1.5, "noise_lambda": 1000.0},
    "low_blur_high_noise": {"psf_dim": 15, "psf_sigma": 1.5, "noise_lambda": 15.0},
    "high_blur_low_noise": {"psf_dim": 27, "psf_sigma": 5.0, "noise_lambda": 1000.0},
    "high_blur_high_noise": {"psf_dim": 27, "psf_sigma": 5.0, "noise_lambda": 15.0},
}

_LIST_FIELDS = ("smoother_iters", "angles", "detectors", "snapshot_iters")


@dataclass
class ExperimentConfig:
    experiment: str = "deconv"
    grid_exponent: int = 6
    levels: int = 3
    smoother_iters: list = field(default_factory=lambda: [1, 10, 10])
    # 粗い補正の起動条件
    kappa: float = 0.49
    epsilon: float = 1e-3
    epsilon_x: float = 1e-2
    # Armijo
    armijo_sigma: float = 1e-4
    armijo_beta: float = 0.5
    armijo_alpha_bar: float = 1.0
    # ぼかし・ノイズ
    psf_dim: int = 15
    psf_sigma: float = 1.5
    noise_lambda: float = 1000.0
    noisy: bool = True
    # 投影（レベルごと。detectors が空なら各レベルの画像幅）
    angles: list = field(default_factory=lambda: [40, 20, 20])
    detectors: list = field(default_factory=list)
    seed: int = 0
    input_image: str = ""
    output_dir: str = "output"
    iters: int = 60
    sl_iters: int = 60
    top_k: int = 8
    # ddesign: 選ぶ角度どうしの添字の最小間隔
    min_angle_gap: int = 1
    ls_iters: int = 500
    snapshot_iters: list = field(default_factory=list)
    reference_iters: int = 0
    parallel: bool = False
    debug: bool = False

    @property
    def fine_side(self):
        return 2 ** self.grid_exponent - 1

    def sides(self):
        return [2 ** (self.grid_exponent - ell) - 1 for ell in range(self.levels)]

    def detector_counts(self):
        return list(self.detectors) if self.detectors else self.sides()

    def to_dict(self):
        return asdict(self)

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment '{self.experiment}' は {', '.join(EXPERIMENTS)} のいずれかです")
        if self.levels < 1:
            raise ConfigError("levels は1以上でなければなりません")
        if self.grid_exponent < 2 or self.grid_exponent - self.levels + 1 < 1:
            raise ConfigError(f"grid_exponent={self.grid_exponent} では {self.levels} レベルを作れません")
        if self.experiment == "deconv" and self.levels > max(self.grid_exponent - 2, 1):
            raise ConfigError("deconv ではレベル数は grid_exponent - 2 以下にしてください")
        if self.experiment != "selftest" and len(self.smoother_iters) != self.levels:
            raise ConfigError(f"smoother_iters の長さ {len(self.smoother_iters)} が levels={self.levels} と一致しません")
        if any(m < 0 for m in self.smoother_iters) or (self.smoother_iters and self.smoother_iters[0] < 1):
            raise ConfigError("smoother_iters は非負で、最も細かいレベルは1以上です")
        if not 0 < self.kappa < 1 or not 0 < self.epsilon < 1 or not self.epsilon_x > 0:
            raise ConfigError("kappa, epsilon は (0,1)、epsilon_x は正でなければなりません")
        if not 0 < self.armijo_sigma < 1 or not 0 < self.armijo_beta < 1 or not 0 < self.armijo_alpha_bar <= 1:
            raise ConfigError("Armijo の定数が範囲外です")
        if self.psf_dim < 1 or self.psf_dim % 2 == 0 or not self.psf_sigma > 0:
            raise ConfigError("psf_dim は正の奇数、psf_sigma は正でなければなりません")
        if not self.noise_lambda > 0:
            raise ConfigError("noise_lambda は正でなければなりません")
        if self.iters < 0 or self.sl_iters < 0 or self.ls_iters < 1 or self.top_k < 1 or self.reference_iters < 0:
            raise ConfigError("反復回数・top_k の指定が不正です")
        if self.experiment == "tomo":
            self._validate_projection()
        if self.experiment == "ddesign":
            if self.levels > 2:
                raise ConfigError("ddesign は2レベルまでです")
            if self.top_k > self.angles[0]:
                raise ConfigError(f"top_k={self.top_k} が角度数 {self.angles[0]} を超えています")
            if self.min_angle_gap < 1 or (self.top_k - 1) * (2 * self.min_angle_gap - 1) + 1 > self.angles[0]:
                raise ConfigError(f"min_angle_gap={self.min_angle_gap} では {self.angles[0]} 角度から {self.top_k} 個を選べません")
        return self

    def _validate_projection(self):
        if len(self.angles) != self.levels:
            raise ConfigError(f"angles の長さ {len(self.angles)} が levels={self.levels} と一致しません")
        detectors = self.detector_counts()
        if len(detectors) != self.levels:
            raise ConfigError(f"detectors の長さ {len(detectors)} が levels={self.levels} と一致しません")
        for ell in range(1, self.levels):
            if self.angles[ell - 1] % self.angles[ell] != 0:
                raise ConfigError(f"レベル {ell} の角度数 {self.angles[ell]} が1つ上のレベルの角度数を割り切りません")
            if detectors[ell - 1] != 2 * detectors[ell] + 1:
                raise ConfigError(f"レベル {ell} の検出器数は (細かいレベルの検出器数 - 1) / 2 にしてください")


def default_config(experiment="deconv"):
    """実験ごとの既定値（デスクトップ規模）

    2D の転送では滑らかな勾配で ‖Rg‖/‖g‖ ≈ (2^(m-1)-1)/(2^m-1) < 0.49 なので、deconv と tomo の κ は 0.45。
    """
    if experiment == "tomo":
        return ExperimentConfig(experiment="tomo", grid_exponent=6, levels=3, smoother_iters=[1, 5, 5],
                                angles=[40, 20, 20], noisy=False, iters=50, sl_iters=50, kappa=0.45)
    if experiment == "ddesign":
        return ExperimentConfig(experiment="ddesign", grid_exponent=4, levels=2, smoother_iters=[1, 10],
                                angles=[60, 60], detectors=[15, 7], noisy=False, iters=50, sl_iters=50,
                                top_k=8, ls_iters=500, min_angle_gap=4)
    if experiment == "selftest":
        return ExperimentConfig(experiment="selftest", grid_exponent=4, levels=2, smoother_iters=[1, 5],
                                angles=[8, 4], iters=10, sl_iters=10)
    if experiment == "deconv":
        return ExperimentConfig(kappa=0.45)
    raise ConfigError(f"未知の実験 '{experiment}'")


def _coerce(name, raw, default):
    text = str(raw).strip()
    try:
        if name in _LIST_FIELDS:
            return [int(v) for v in text.split(",") if v.strip()]
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"設定 '{name}' の値 '{text}' を解釈できません") from exc
    return text


def apply_overrides(cfg, values):
    """辞書の値で設定を上書きする（未知のキーは ConfigError）"""
    known = {f.name for f in fields(ExperimentConfig)}
    for name, raw in values.items():
        if name not in known:
            raise ConfigError(f"未知の設定キー '{name}'")
        if raw is None:
            continue
        default = getattr(cfg, name)
        value = raw if isinstance(raw, (list, bool, int, float)) and not isinstance(raw, str) else _coerce(name, raw, default)
        if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        setattr(cfg, name, value)
    return cfg


def parse_config_text(text):
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{lineno} 行目: 'key = value' の形式ではありません")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{lineno} 行目: キーが空です")
        values[key] = value
    return values


def load_config(path=None, experiment=None, overrides=None):
    """既定値 → 設定ファイル → overrides の順に適用し、検証済みの設定を返す"""
    values = {}
    if path:
        try:
            values = parse_config_text(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"設定ファイル '{path}' を読めません: {exc}") from exc
    name = experiment or values.get("experiment", "deconv")
    if experiment and values.get("experiment", experiment) != experiment:
        logger.info("設定ファイルの experiment=%s をコマンドラインの %s で上書きします", values["experiment"], experiment)
    values["experiment"] = name
    cfg = apply_overrides(default_config(name), values)
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg.validate()


def apply_scenario(cfg, scenario):
    if scenario not in SCENARIOS:
        raise ConfigError(f"未知のシナリオ '{scenario}'（{', '.join(SCENARIOS)}）")
    return apply_overrides(cfg, SCENARIOS[scenario])


# --- プリセット (JSON) ---
def load_presets(path):
    path = Path(path)
    if not path.exists():
        return {}
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"プリセットファイル '{path}' の形式が正しくありません") from exc


def save_preset(path, name, settings):
    presets = load_presets(path)
    presets[name] = settings
    Path(path).write_text(json.dumps(presets, indent=2, ensure_ascii=False), encoding="utf-8")
    return presets
