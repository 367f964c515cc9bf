"""
seeable 单类深度伪造检测包
"""

__version__ = "1.0.0"
__author__ = "seeable 开发组"
__description__ = "基于局部软差异定位与超球面原型回归的单类深度伪造检测"
