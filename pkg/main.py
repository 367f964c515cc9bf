#!/usr/bin/env python3
"""
seeable 命令行启动脚本
"""

import os
import sys

# 添加项目根目录到Python路径
project_root = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, project_root)


def main() -> int:
    """主函数"""
    from seeable.api.commands import main as run

    return run(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
