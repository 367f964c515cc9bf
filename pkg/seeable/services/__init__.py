"""
服务包
原型几何、软差异工厂、引导图、损失、检测器与训练
"""
