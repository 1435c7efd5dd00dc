"""
Validated data models and result records
"""
