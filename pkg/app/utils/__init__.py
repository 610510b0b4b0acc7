"""
工具模块
"""

