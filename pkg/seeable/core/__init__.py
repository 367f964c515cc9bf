"""
核心包：设置、配置加载、日志与异常
"""
