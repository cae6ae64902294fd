"""
===============================================================================
Split JSCC command-line application
===============================================================================

Фабрика Flask-приложения: конфигурация, логирование и регистрация
blueprints, чьи CLI-команды попадают в app.cli. Точка входа -
SplitJSCCGroup (FlaskGroup), который переводит ошибки в коды выхода.

    0 - успех
    2 - ошибка конфигурации
    3 - несовместимые артефакты
    4 - расхождение обучения
===============================================================================
"""

# =============================================================================
# ИМПОРТЫ
# =============================================================================
import logging
import os
from logging.handlers import RotatingFileHandler

import click
from flask import Flask
from flask.cli import FlaskGroup
from marshmallow import ValidationError

from config import get_config
from utils.errors import EXIT_CONFIG, SplitJSCCError

APP_NAME = "splitjscc"
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

logger = logging.getLogger(APP_NAME)


# =============================================================================
# ПРИЛОЖЕНИЕ
# =============================================================================


def create_app(config_name=None):
    """
    Фабрика приложения Flask

    Args:
        config_name: Имя конфигурации (development, production, testing);
            по умолчанию из SPLITJSCC_ENV

    Returns:
        Flask приложение; команды доступны через app.cli
    """
    settings = get_config(config_name)

    app = Flask(APP_NAME)
    app.config.from_object(settings)
    settings.init_app(app)

    setup_logging(app)
    register_blueprints(app)
    return app


class SplitJSCCGroup(FlaskGroup):
    """FlaskGroup, переводящий ошибки команд в коды выхода"""

    def __init__(self, create_app=create_app, **kwargs):
        kwargs.setdefault("name", APP_NAME)
        kwargs.setdefault("help", "Split deep JSCC with a learned BSC interface")
        super().__init__(
            create_app=create_app,
            add_default_commands=False,
            add_version_option=False,
            load_dotenv=False,
            set_debug_flag=False,
            **kwargs,
        )

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except ValidationError as error:
            ctx.exit(handle_validation_error(error))
        except SplitJSCCError as error:
            ctx.exit(handle_known_error(error))


# =============================================================================
# ЛОГИРОВАНИЕ
# =============================================================================


def setup_logging(app):
    """Console handler plus a rotating file handler when LOG_FILE is set"""
    settings = app.config
    root = logging.getLogger()

    # repeated create_app() calls must not stack handlers
    for handler in list(root.handlers):
        if getattr(handler, "_splitjscc", False):
            root.removeHandler(handler)
            handler.close()

    formatter = logging.Formatter(LOG_FORMAT)
    handlers = [logging.StreamHandler()]
    if settings["LOG_FILE"]:
        log_dir = os.path.dirname(settings["LOG_FILE"])
        if log_dir:
            os.makedirs(log_dir, exist_ok=True)
        handlers.append(
            RotatingFileHandler(
                settings["LOG_FILE"],
                maxBytes=settings["LOG_MAX_BYTES"],
                backupCount=settings["LOG_BACKUP_COUNT"],
            )
        )
    for handler in handlers:
        handler.setFormatter(formatter)
        handler._splitjscc = True
        root.addHandler(handler)
    root.setLevel(settings["LOG_LEVEL"])
    app.logger.debug(f"Logging configured: level={settings['LOG_LEVEL']}, file={settings['LOG_FILE']}")


# =============================================================================
# BLUEPRINTS
# =============================================================================


def register_blueprints(app):
    """Регистрация blueprints"""
    for bp_name in ("training", "evaluation"):
        module = __import__(f"blueprints.{bp_name}", fromlist=[f"{bp_name}_bp"])
        app.register_blueprint(getattr(module, f"{bp_name}_bp"))
    app.logger.debug(f"Blueprints: {', '.join(app.blueprints)}")


# =============================================================================
# ОБРАБОТЧИКИ ОШИБОК
# =============================================================================


def handle_known_error(error):
    """
    Ошибка предметной области

    Returns:
        Код выхода из иерархии utils.errors
    """
    logger.error(f"❌ {type(error).__name__}: {error.message}")
    if error.details:
        logger.error(f"   {error.to_dict()}")
    click.echo(f"error: {error.message}", err=True)
    return error.exit_code


def handle_validation_error(error):
    """Ошибка схемы marshmallow, код выхода 2"""
    logger.error(f"❌ Invalid configuration: {error.messages}")
    click.echo(f"error: invalid configuration: {error.messages}", err=True)
    return EXIT_CONFIG
