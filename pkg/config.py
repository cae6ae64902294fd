"""
========================================
CONFIGURATION MODULE
========================================
Настройки процесса из переменных окружения (.env поддерживается).
Параметры эксперимента живут в models/experiment.py.
"""

import os

from dotenv import load_dotenv

# Загружаем переменные окружения из .env
env_path = os.path.join(os.path.dirname(os.path.abspath(__file__)), ".env")
if os.path.exists(env_path):
    load_dotenv(env_path)


class Config:
    """Базовая конфигурация"""

    DEBUG = os.getenv("DEBUG", "False").lower() == "true"
    TESTING = False

    # ========================================
    # ЛОГИРОВАНИЕ
    # ========================================
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
    LOG_FILE = os.getenv("LOG_FILE", "logs/splitjscc.log")
    LOG_MAX_BYTES = int(os.getenv("LOG_MAX_BYTES", "10485760"))  # 10MB
    LOG_BACKUP_COUNT = int(os.getenv("LOG_BACKUP_COUNT", "5"))

    # ========================================
    # ДАННЫЕ И ВЫЧИСЛЕНИЯ
    # ========================================
    NUM_THREADS = int(os.getenv("SPLITJSCC_NUM_THREADS", "0"))  # 0 = torch default

    @classmethod
    def init_app(cls, app=None):
        """Создаёт каталог логов и применяет настройки потоков torch"""
        if cls.LOG_FILE:
            log_dir = os.path.dirname(cls.LOG_FILE)
            if log_dir:
                os.makedirs(log_dir, exist_ok=True)
        if cls.NUM_THREADS > 0:
            import torch

            torch.set_num_threads(cls.NUM_THREADS)


class DevelopmentConfig(Config):
    """Конфигурация для разработки"""

    DEBUG = True
    LOG_LEVEL = os.getenv("LOG_LEVEL", "DEBUG")


class ProductionConfig(Config):
    """Конфигурация для продакшена"""

    DEBUG = False


class TestingConfig(Config):
    """Конфигурация для тестирования"""

    TESTING = True
    DEBUG = True
    LOG_FILE = None
    LOG_LEVEL = "WARNING"


config = {
    "development": DevelopmentConfig,
    "production": ProductionConfig,
    "testing": TestingConfig,
    "default": ProductionConfig,
}


def get_config(config_name=None):
    """Получить класс конфигурации (по умолчанию из SPLITJSCC_ENV)"""
    if config_name is None:
        config_name = os.getenv("SPLITJSCC_ENV", "production")
    return config.get(config_name, config["default"])


def data_root_override():
    """SPLITJSCC_DATA_ROOT, read at call time so tests can patch the environment"""
    return os.getenv("SPLITJSCC_DATA_ROOT") or None
