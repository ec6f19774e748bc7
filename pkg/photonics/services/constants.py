"""
物理常数表（CODATA 2018，精确定义值）与单位换算。

内部单位约定：波长 nm，滤波器带宽 pm，时间 ps，速率 1/s，功率 mW。
"""

import math

from scipy import constants

PLANCK = constants.h           # J·s
LIGHT_SPEED = constants.c      # m/s

NM = 1e-9
PM = 1e-12
PS = 1e-12
MW = 1e-3

# 高斯 FWHM 与标准差之比
FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))

# 变换极限高斯脉冲的时间带宽积 Δt·Δν = 2ln2/π ≈ 0.441
GAUSSIAN_TIME_BANDWIDTH = 2.0 * math.log(2.0) / math.pi

# 相干时间公式中的系数 τ_c = 0.44 λ²/(cΔλ)
COHERENCE_FACTOR = 0.44
