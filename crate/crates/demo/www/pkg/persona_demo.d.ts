/* tslint:disable */
/* eslint-disable */

/**
 * Pooled view of a row-major relevance matrix.
 */
export class Pooling {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    readonly cols: number;
    readonly cumulative: number;
    readonly rowScores: Float64Array;
    readonly rows: number;
    /**
     * Row-major pooling weights; each row sums to one.
     */
    readonly weights: Float64Array;
}

export class Ranking {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Candidate indices, best first.
     */
    readonly order: Uint32Array;
    readonly scores: Float64Array;
}

export function perceptionRewards(agent: Float64Array, user: Float64Array, gamma: number): Float64Array;

export function poolRelevance(values: Float64Array, cols: number, tau: number): Pooling;

export function rankCandidates(lm_logprobs: Float64Array, lengths: Uint32Array, nup_logprobs: Float64Array, alpha: number): Ranking;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_pooling_free: (a: number, b: number) => void;
    readonly __wbg_ranking_free: (a: number, b: number) => void;
    readonly perceptionRewards: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly poolRelevance: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly pooling_cols: (a: number) => number;
    readonly pooling_cumulative: (a: number) => number;
    readonly pooling_rowScores: (a: number) => [number, number];
    readonly pooling_rows: (a: number) => number;
    readonly pooling_weights: (a: number) => [number, number];
    readonly rankCandidates: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number];
    readonly ranking_order: (a: number) => [number, number];
    readonly ranking_scores: (a: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
