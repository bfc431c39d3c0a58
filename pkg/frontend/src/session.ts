// Session view state machine.
//
// Invariants the tests pin down:
//   - strip positions stay contiguous from 0; a step appends at the next
//     band, a reject replaces the latest strip in place and nothing else;
//   - at most one request is in flight (the pending flag makes duplicate
//     step issuance impossible);
//   - the rendered state is a pure function of the server response log
//     (replayLog rebuilds it from a recorded transcript).

import { ApiClient, ApiError, ClassesInfo, SessionConfig, StepResult } from './api.js';

// Everything the controller needs from the client; tests stub this.
export type SessionApi = Pick<ApiClient, 'createSession' | 'step' | 'reject'>;

export type UiSessionView = {
    sessionId: string | null;
    config: SessionConfig | null;
    targetLen: number;
    strips: string[]; // position -> base64 PNG
    pending: boolean;
    done: boolean;
    banner: string | null; // dismissible error (unexpected failures)
    hint: string | null; // 409/423 state hints, not errors
};

export function emptyView(): UiSessionView {
    return {
        sessionId: null,
        config: null,
        targetLen: 0,
        strips: [],
        pending: false,
        done: false,
        banner: null,
        hint: null,
    };
}

export type StartForm = {
    classId: number;
    targetLen: number;
    seed?: number;
    cfgEnd?: number;
    nSteps?: number;
};

export function validateForm(form: StartForm, info: ClassesInfo): string | null {
    if (!info.classes.some((c) => c.id === form.classId)) {
        return `class ${form.classId} is not served`;
    }
    if (form.targetLen < 1 || form.targetLen > info.max_target_len) {
        return `target length must be in [1, ${info.max_target_len}]`;
    }
    if (info.variant === 'baseline_2d' && form.targetLen > info.train_len) {
        return `baseline_2d checkpoints cannot extrapolate past ${info.train_len}`;
    }
    return null;
}

export function applyStepResult(view: UiSessionView, result: StepResult, kind: 'step' | 'reject'): UiSessionView {
    const strips = view.strips.slice();
    if (kind === 'step') {
        if (result.position !== strips.length) {
            return { ...view, banner: `server stepped position ${result.position}, expected ${strips.length}` };
        }
        strips.push(result.image_strip);
    } else {
        if (result.position !== strips.length - 1) {
            return { ...view, banner: `server resampled position ${result.position}, expected ${strips.length - 1}` };
        }
        strips[strips.length - 1] = result.image_strip;
    }
    return { ...view, strips, done: result.done, hint: null };
}

export class SessionController {
    view: UiSessionView = emptyView();

    constructor(
        private api: SessionApi,
        private onChange: (view: UiSessionView) => void = () => {},
    ) {}

    private update(view: UiSessionView): void {
        this.view = view;
        this.onChange(this.view);
    }

    dismissBanner(): void {
        this.update({ ...this.view, banner: null });
    }

    async start(form: StartForm, info: ClassesInfo): Promise<void> {
        const problem = validateForm(form, info);
        if (problem) {
            this.update({ ...this.view, banner: problem });
            return;
        }
        if (this.view.pending) return;
        this.update({ ...emptyView(), pending: true, targetLen: form.targetLen });
        try {
            const created = await this.api.createSession({
                class_id: form.classId,
                target_len: form.targetLen,
                seed: form.seed,
                cfg_end: form.cfgEnd,
                n_steps: form.nSteps,
            });
            this.update({
                ...this.view,
                sessionId: created.session_id,
                config: created.config,
                pending: false,
            });
        } catch (err) {
            this.update({ ...emptyView(), banner: describe(err) });
        }
    }

    canStep(): boolean {
        return this.view.sessionId !== null && !this.view.pending && !this.view.done;
    }

    canReject(): boolean {
        return this.view.sessionId !== null && !this.view.pending && this.view.strips.length > 0;
    }

    async step(): Promise<void> {
        if (!this.canStep()) return;
        this.update({ ...this.view, pending: true });
        try {
            const result = await this.api.step(this.view.sessionId as string);
            this.update({ ...applyStepResult(this.view, result, 'step'), pending: false });
        } catch (err) {
            this.settleFailure(err);
        }
    }

    async reject(): Promise<void> {
        if (!this.canReject()) return;
        this.update({ ...this.view, pending: true });
        try {
            const result = await this.api.reject(this.view.sessionId as string);
            this.update({ ...applyStepResult(this.view, result, 'reject'), pending: false });
        } catch (err) {
            this.settleFailure(err);
        }
    }

    private settleFailure(err: unknown): void {
        // 409/423 are ordinary state signals (done / in flight), not errors.
        if (err instanceof ApiError && (err.status === 409 || err.status === 423)) {
            const done = err.status === 409 ? true : this.view.done;
            this.update({ ...this.view, pending: false, done, hint: err.message });
            return;
        }
        this.update({ ...this.view, pending: false, banner: describe(err) });
    }
}

function describe(err: unknown): string {
    if (err instanceof ApiError) return `server ${err.status}: ${err.message}`;
    return err instanceof Error ? err.message : String(err);
}

// ---------------------------------------------------------------------------
// Replay: rebuild the view from a recorded server transcript.
// ---------------------------------------------------------------------------

export type LogEntry = {
    op: string;
    status: number;
    body: Record<string, unknown> | null;
};

export function replayLog(entries: LogEntry[]): UiSessionView {
    let view = emptyView();
    for (const entry of entries) {
        if (entry.op === 'create' && entry.status === 201 && entry.body) {
            const config = entry.body['config'] as SessionConfig;
            view = {
                ...emptyView(),
                sessionId: entry.body['session_id'] as string,
                config,
                targetLen: config.target_len,
            };
        } else if ((entry.op === 'step' || entry.op === 'reject') && entry.status === 200 && entry.body) {
            view = applyStepResult(view, entry.body as unknown as StepResult, entry.op);
        } else if (entry.status === 409) {
            view = { ...view, done: true, hint: 'session is done' };
        }
    }
    return view;
}
