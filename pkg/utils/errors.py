"""
========================================
ERRORS - иерархия исключений
========================================
Каждое исключение несёт exit_code, который CLI возвращает оператору
(аналог кода ответа в create_error_response).

    0 - успех
    2 - ошибка конфигурации
    3 - несовместимые / повреждённые артефакты
    4 - расхождение обучения (loss не конечен)
"""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ARTIFACT = 3
EXIT_DIVERGED = 4


class SplitJSCCError(Exception):
    """Base class for all operator-facing errors"""

    exit_code = 1

    def __init__(self, message, details=None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def to_dict(self):
        return {
            "error": type(self).__name__,
            "message": self.message,
            "code": self.exit_code,
            "details": self.details,
        }


# ========================================
# КОНФИГУРАЦИЯ И ДАННЫЕ
# ========================================


class ConfigError(SplitJSCCError):
    exit_code = EXIT_CONFIG


class DatasetError(ConfigError):
    pass


class DatasetMissingError(DatasetError):
    pass


class DatasetChecksumError(DatasetError):
    pass


# ========================================
# АРТЕФАКТЫ
# ========================================


class ArtifactError(SplitJSCCError):
    exit_code = EXIT_ARTIFACT


class ArtifactIncompatibleError(ArtifactError):
    pass


class MissingModelError(ArtifactError):
    """Raised once with every missing sweep cell listed in details['missing']"""


class OutputExistsError(ArtifactError):
    pass


class InterfaceSpecError(ArtifactError):
    pass


class SpecFileMissingError(InterfaceSpecError):
    pass


class SpecVersionError(InterfaceSpecError):
    pass


class SpecCorruptedError(InterfaceSpecError):
    pass


class SpecValidationError(InterfaceSpecError):
    pass


# ========================================
# ОБУЧЕНИЕ
# ========================================


class TrainingDivergedError(SplitJSCCError):
    exit_code = EXIT_DIVERGED

    def __init__(self, stage, epoch, step, loss):
        super().__init__(
            f"{stage}: loss became non-finite ({loss}) at epoch {epoch}, step {step}",
            details={"stage": stage, "epoch": epoch, "step": step, "loss": str(loss)},
        )


# ========================================
# ЧИСЛЕННЫЙ API
# ========================================


class ShapeError(ValueError):
    """Shape or length mismatch between tensors"""


class ChannelInputError(ValueError):
    """Channel input that cannot be power-normalized"""
