/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_pooling_free: (a: number, b: number) => void;
export const __wbg_ranking_free: (a: number, b: number) => void;
export const perceptionRewards: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const poolRelevance: (a: number, b: number, c: number, d: number) => [number, number, number];
export const pooling_cols: (a: number) => number;
export const pooling_cumulative: (a: number) => number;
export const pooling_rowScores: (a: number) => [number, number];
export const pooling_rows: (a: number) => number;
export const pooling_weights: (a: number) => [number, number];
export const rankCandidates: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number];
export const ranking_order: (a: number) => [number, number];
export const ranking_scores: (a: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
