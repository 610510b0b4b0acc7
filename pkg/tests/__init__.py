"""
FinMem 测试包
"""
