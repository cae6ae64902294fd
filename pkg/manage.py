"""
Command-line entry point

    python manage.py train-stage1 --config configs/toy.json
"""

import os
import sys
from pathlib import Path

# Определяем базовый путь проекта
BASE_DIR = Path(__file__).resolve().parent
if str(BASE_DIR) not in sys.path:
    sys.path.insert(0, str(BASE_DIR))

os.environ.setdefault("PYTHONUNBUFFERED", "1")

from app import SplitJSCCGroup, create_app  # noqa: E402

cli = SplitJSCCGroup(create_app=create_app)

if __name__ == "__main__":
    cli()
