"""
领域类型：特征、CPC、后端模型、trial、估计量校验、流水线与异常
"""
