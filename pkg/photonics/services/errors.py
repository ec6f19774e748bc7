"""
模拟服务的异常层级。命令层据此映射退出码：
配置/定义域错误 -> 2，统计量不足 -> 3，其余 -> 4。
"""


class SimulationError(Exception):
    """所有模拟错误的基类。"""


class DomainError(SimulationError, ValueError):
    """输入违反物理或数学前置条件。"""


class ConfigError(SimulationError):
    """配置文件无法通过校验；path 为出错字段的点分路径。"""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class StatisticsError(SimulationError):
    """事件数不足以完成拟合或估计。"""

    def __init__(self, message: str, counts: dict | None = None, suggestion: str = ""):
        self.counts = dict(counts or {})
        self.suggestion = suggestion
        text = message
        if suggestion:
            text = f"{message} ({suggestion})"
        super().__init__(text)


class FitError(StatisticsError):
    """最小二乘拟合失败或前置条件不满足，counts 中附带直方图统计。"""
