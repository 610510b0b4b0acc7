"""
FinMem - 分层记忆交易 Agent
"""
__version__ = "1.0.0"
