"""
异常定义
每类异常携带命令行退出码
"""


class SeeableError(Exception):
    """所有业务异常的基类"""

    exit_code = 1


class UsageError(SeeableError):
    """命令行参数或配置错误"""

    exit_code = 1


class DomainError(SeeableError, ValueError):
    """数学运算的输入超出定义域"""

    exit_code = 2


class DimensionalityError(DomainError):
    """原型数量不满足 2 <= K <= D + 1"""


class DegenerateBatchError(DomainError):
    """批次中没有任何样本拥有正样本"""


class DataError(SeeableError):
    """清单或数据集异常，包括单类训练约束被破坏"""

    exit_code = 2


class ModelError(SeeableError):
    """模型与原型维度不一致等模型异常"""

    exit_code = 2


class NumericError(SeeableError):
    """训练过程中出现非有限损失"""

    exit_code = 3
