"""
流水线编排、阶段回执、作图与玩具语料
"""
