"""
pairsim 项目：窄带光子对实验的连续时间蒙特卡洛模拟。
"""

__version__ = "1.0.0"
