"""
Django settings for pairsim project.

Only the management commands are used; there is no web surface and no
database.
"""

from pathlib import Path

BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = 'pairsim-local-only-not-served'

DEBUG = False

ALLOWED_HOSTS = []

INSTALLED_APPS = [
    'photonics',
]

# 不使用 Django ORM 数据库（配置校验走 mongoengine 文档，不连接 MongoDB）
DATABASES = {}

LANGUAGE_CODE = 'en-us'
TIME_ZONE = 'UTC'
USE_I18N = False
USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# ---------- 模拟配置 ----------
PAIRSIM_PRESETS_DIR = BASE_DIR / 'photonics' / 'presets'
PAIRSIM_OUTPUT_DIR = BASE_DIR / 'output'
PAIRSIM_SCHEMA_VERSIONS = (1,)

# 长时段按固定窗口切块生成，每块独立派生随机流
PAIRSIM_CHUNK_MS = 100.0

# 数值积分波长网格：2001 点，覆盖 ±5 FWHM
PAIRSIM_GRID_POINTS = 2001
PAIRSIM_GRID_SPAN_FWHM = 5.0

# 预计事件数超过此值时需要 --yes 确认
PAIRSIM_CONFIRM_EVENTS = 1e9

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'plain',
        },
    },
    'loggers': {
        'photonics': {
            'handlers': ['console'],
            'level': 'INFO',
            'propagate': False,
        },
    },
}
