#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
DDN Lab - 内部模块

配置加载、产物写入、线程安全结果存储等内部工具。
"""
