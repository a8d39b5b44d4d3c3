"""xrpipe runtime services: channels, kernels, wire protocol, links, pipelines and benchmarks"""
