"""
数据模型
"""
from .schemas import *

