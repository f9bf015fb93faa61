from dataclasses import dataclass
import os

from dotenv import load_dotenv


load_dotenv()


@dataclass
class Config:
    """Основные настройки симулятора (окружение процесса, не эксперимента)."""

    data_dir: str = "data/mnist"
    cache_dir: str = ".cache/codebooks"
    output_dir: str = "runs"
    registry_backend: str = "sqlite"
    registry_path: str = "runs/registry.sqlite3"
    log_level: str = "INFO"
    workers: int = 4


def _int_env(name: str, default: int) -> int:
    raw = (os.getenv(name) or "").strip()
    if not raw:
        return default
    try:
        value = int(raw)
    except ValueError:
        raise RuntimeError(f"Переменная окружения {name} должна быть целым числом: {raw!r}")
    if value < 1:
        raise RuntimeError(f"Переменная окружения {name} должна быть положительной: {raw!r}")
    return value


def load_config() -> Config:
    """Загрузка конфигурации только из переменных окружения."""
    DATA_DIR = os.getenv("FEDVQCS_DATA_DIR", "data/mnist")
    CACHE_DIR = os.getenv("FEDVQCS_CACHE_DIR", ".cache/codebooks")
    OUTPUT_DIR = os.getenv("FEDVQCS_OUTPUT_DIR", "runs")
    REGISTRY_BACKEND = os.getenv("FEDVQCS_REGISTRY", "").strip().lower()
    REGISTRY_PATH = os.getenv("FEDVQCS_REGISTRY_PATH", "")
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").strip().upper() or "INFO"
    WORKERS = _int_env("FEDVQCS_WORKERS", 4)

    # Реестр по умолчанию лежит рядом с результатами запусков.
    if not REGISTRY_PATH:
        REGISTRY_PATH = os.path.join(OUTPUT_DIR, "registry.sqlite3")
    if not REGISTRY_BACKEND:
        REGISTRY_BACKEND = "sqlite"

    return Config(
        data_dir=DATA_DIR,
        cache_dir=CACHE_DIR,
        output_dir=OUTPUT_DIR,
        registry_backend=REGISTRY_BACKEND,
        registry_path=REGISTRY_PATH,
        log_level=LOG_LEVEL,
        workers=WORKERS,
    )


config = load_config()
