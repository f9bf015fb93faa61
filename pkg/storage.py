from config import Config, config
from database import Database, NullRegistry


def build_registry(settings: Config = config):
    backend = (settings.registry_backend or "sqlite").strip().lower()
    if backend == "none":
        return NullRegistry()
    if backend == "sqlite":
        return Database(settings.registry_path)
    raise RuntimeError(
        f"Неизвестный FEDVQCS_REGISTRY='{backend}'. Используйте 'sqlite' или 'none'."
    )
